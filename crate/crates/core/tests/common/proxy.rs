use std::io::{Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

/// Bytes seen on one proxied connection, per direction.
#[derive(Default, Clone)]
pub struct Conn {
    pub up: Vec<u8>,
    pub down: Vec<u8>,
}

/// A loopback relay that records everything it forwards.
pub struct Recorder {
    pub addr: String,
    conns: Arc<Mutex<Vec<Arc<Mutex<Conn>>>>>,
    stop: Arc<AtomicBool>,
}

impl Recorder {
    pub fn start(target: String) -> Recorder {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        listener.set_nonblocking(true).unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let conns: Arc<Mutex<Vec<Arc<Mutex<Conn>>>>> = Arc::default();
        let stop = Arc::new(AtomicBool::new(false));
        {
            let (conns, stop) = (conns.clone(), stop.clone());
            thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    let client = match listener.accept() {
                        Ok((c, _)) => c,
                        Err(_) => {
                            thread::sleep(Duration::from_millis(5));
                            continue;
                        }
                    };
                    client.set_nonblocking(false).unwrap();
                    let server = TcpStream::connect(&target).unwrap();
                    let conn = Arc::new(Mutex::new(Conn::default()));
                    conns.lock().unwrap().push(conn.clone());
                    pump(client.try_clone().unwrap(), server.try_clone().unwrap(), conn.clone(), true);
                    pump(server, client, conn, false);
                }
            });
        }
        Recorder { addr, conns, stop }
    }

    pub fn transcript(&self) -> Vec<Conn> {
        // Let the relays drain.
        thread::sleep(Duration::from_millis(200));
        self.conns.lock().unwrap().iter().map(|c| c.lock().unwrap().clone()).collect()
    }
}

impl Drop for Recorder {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

fn pump(mut from: TcpStream, mut to: TcpStream, conn: Arc<Mutex<Conn>>, up: bool) {
    thread::spawn(move || {
        let mut buf = vec![0u8; 65536];
        loop {
            let n = match from.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => n,
            };
            {
                let mut c = conn.lock().unwrap();
                let side = if up { &mut c.up } else { &mut c.down };
                side.extend_from_slice(&buf[..n]);
            }
            if to.write_all(&buf[..n]).is_err() {
                break;
            }
        }
        let _ = to.shutdown(Shutdown::Write);
    });
}

impl Recorder {
    /// Connections relayed so far.
    pub fn connections(&self) -> usize {
        self.conns.lock().unwrap().len()
    }
}

