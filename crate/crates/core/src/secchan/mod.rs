//! Authentication and the three channel security modes.
//!
//! After the clear HELLO/WELCOME exchange both peers derive directional
//! AES-128-GCM keys from the account's pre-shared key and the two nonces. The
//! client proves knowledge of the psk with an HMAC over the nonces and its
//! username, sent in a sealed `AUTH` frame. The server does not learn the
//! username before opening that frame: it tries the keys of every account
//! it knows, so usernames never cross the wire in clear either.

mod channel;
mod keys;
mod policy;

use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::time::Duration;

use rand::RngCore;

use crate::perms::{Account, AccountSet, AccountType};
use crate::wire::{
    client_handshake, max_payload_for, read_frame, server_handshake, tags, FieldMap, Frame, FrameType, Hello,
    ServerPolicy, SessionParams, Status, WireError, DEFAULT_MAX_PAYLOAD, FLAG_SEALED,
};

pub use channel::SecureChannel;
pub use keys::{compute_proof, derive_keys, proofs_equal, ChannelKeys, Role, TAG_LEN};
pub use policy::{classify_frame, sensitive_tags, Sealing};

#[derive(Debug, thiserror::Error)]
pub enum SecError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("integrity check failed")]
    IntegrityFailure,
    #[error("nonce counter exhausted")]
    CounterExhausted,
    #[error("authentication failed")]
    AuthFailed,
    #[error("{0} frame violates the channel security policy")]
    PolicyViolation(FrameType),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl SecError {
    pub fn status(&self) -> Status {
        match self {
            SecError::Wire(w) => w.status(),
            SecError::AuthFailed => Status::AuthFailed,
            SecError::IntegrityFailure => Status::IntegrityMismatch,
            _ => Status::BadRequest,
        }
    }

    /// The status code when this error came from the peer.
    pub fn remote_status(&self) -> Option<Status> {
        match self {
            SecError::Wire(WireError::Remote { code, .. }) => Some(*code),
            _ => None,
        }
    }

    pub fn is_disconnect(&self) -> bool {
        matches!(self, SecError::Wire(WireError::Closed) | SecError::Wire(WireError::Io(_)))
    }
}

/// Client-side secret.
#[derive(Clone)]
pub struct Credentials {
    pub username: String,
    pub psk: Vec<u8>,
}

impl std::fmt::Debug for Credentials {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Credentials").field("username", &self.username).finish_non_exhaustive()
    }
}

/// What a client presents in its `AUTH` frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Credential {
    pub username: String,
    pub proof: [u8; 32],
}

impl Credential {
    pub fn new(creds: &Credentials, client_nonce: &[u8; 16], server_nonce: &[u8; 16]) -> Self {
        Credential {
            username: creds.username.clone(),
            proof: compute_proof(&creds.psk, client_nonce, server_nonce, &creds.username),
        }
    }

    fn to_fields(&self) -> FieldMap {
        FieldMap::new()
            .with_str(tags::auth::USERNAME, &self.username)
            .with(tags::auth::PROOF, self.proof)
    }

    fn from_fields(map: &FieldMap) -> Result<Self, WireError> {
        let username = map.require_str(tags::auth::USERNAME)?;
        if username.len() > 64 {
            return Err(WireError::BadField {
                tag: tags::auth::USERNAME,
                reason: "username longer than 64 bytes",
            });
        }
        Ok(Credential {
            username: username.to_string(),
            proof: map.require_array(tags::auth::PROOF)?,
        })
    }
}

/// Verifies a credential against the account set. Unknown usernames are
/// checked against a random key so both failure paths do the same work.
pub fn authenticate(
    credential: &Credential,
    accounts: &AccountSet,
    client_nonce: &[u8; 16],
    server_nonce: &[u8; 16],
) -> Result<Arc<Account>, SecError> {
    let account = accounts.get(&credential.username);
    let psk = match account {
        Some(a) => a.psk.clone(),
        None => {
            let mut dummy = vec![0u8; 32];
            rand::thread_rng().fill_bytes(&mut dummy);
            dummy
        }
    };
    let expected = compute_proof(&psk, client_nonce, server_nonce, &credential.username);
    let ok = proofs_equal(&expected, &credential.proof);
    match account {
        Some(a) if ok => Ok(a.clone()),
        _ => Err(SecError::AuthFailed),
    }
}

/// An authenticated client connection.
pub struct ClientSession<S> {
    pub channel: SecureChannel<S>,
    pub params: SessionParams,
    pub account_type: AccountType,
}

/// Runs the handshake and authentication over an already-connected stream.
pub fn client_session<S: Read + Write>(mut stream: S, creds: &Credentials, hello: &Hello) -> Result<ClientSession<S>, SecError> {
    let welcome = client_handshake(&mut stream, hello)?;
    let mut keys = derive_keys(&creds.psk, &hello.nonce, &welcome.nonce, Role::Client);
    let credential = Credential::new(creds, &hello.nonce, &welcome.nonce);
    let sealed = keys.seal(&credential.to_fields().encode())?;
    let auth = Frame {
        frame_type: FrameType::AUTH,
        flags: FLAG_SEALED,
        payload: sealed,
    };
    crate::wire::write_frame(&mut stream, &auth, DEFAULT_MAX_PAYLOAD)?;
    let reply = read_frame(&mut stream, DEFAULT_MAX_PAYLOAD)?;
    let account_type = match reply.frame_type {
        FrameType::AUTH_OK if reply.is_sealed() => {
            let map = FieldMap::decode(&keys.open(&reply.payload)?)?;
            match map.get_u8(tags::auth::ACCOUNT_TYPE)? {
                Some(1) => AccountType::Administrator,
                _ => AccountType::Others,
            }
        }
        FrameType::AUTH_FAIL => return Err(SecError::AuthFailed),
        FrameType::ERROR => {
            let map = FieldMap::decode(&reply.payload)?;
            return Err(SecError::Wire(crate::wire::remote_error(&map)));
        }
        other => {
            return Err(SecError::Wire(WireError::UnexpectedFrame {
                expected: FrameType::AUTH_OK,
                got: other,
            }))
        }
    };
    let params = welcome.params;
    let channel = SecureChannel::new(stream, keys, params.security_mode, max_payload_for(params.buffer_size));
    Ok(ClientSession {
        channel,
        params,
        account_type,
    })
}

pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

/// Connects over TCP, then runs [`client_session`].
pub fn connect<A: ToSocketAddrs>(
    addr: A,
    creds: &Credentials,
    params: SessionParams,
    attach: Option<([u8; 16], u8)>,
) -> Result<ClientSession<TcpStream>, SecError> {
    let mut last_err = None;
    let mut stream = None;
    for candidate in addr.to_socket_addrs().map_err(WireError::from)? {
        match TcpStream::connect_timeout(&candidate, CONNECT_TIMEOUT) {
            Ok(s) => {
                stream = Some(s);
                break;
            }
            Err(e) => last_err = Some(e),
        }
    }
    let stream = match stream {
        Some(s) => s,
        None => {
            return Err(SecError::Wire(WireError::Io(last_err.unwrap_or_else(|| {
                std::io::Error::new(std::io::ErrorKind::NotFound, "address resolved to nothing")
            }))))
        }
    };
    stream.set_nodelay(true).map_err(WireError::from)?;
    let mut hello = Hello::new(params);
    hello.attach = attach;
    client_session(stream, creds, &hello)
}

/// An authenticated server-side connection.
pub struct Accepted<S> {
    pub channel: SecureChannel<S>,
    pub params: SessionParams,
    pub hello: Hello,
    pub account: Arc<Account>,
}

/// Server side of handshake and authentication. At most one `AUTH` attempt
/// is read; a failure answers `AUTH_FAIL` and returns [`SecError::AuthFailed`].
pub fn accept<S: Read + Write>(mut stream: S, policy: &ServerPolicy, accounts: &AccountSet) -> Result<Accepted<S>, SecError> {
    let (hello, welcome) = server_handshake(&mut stream, policy)?;
    let frame = read_frame(&mut stream, DEFAULT_MAX_PAYLOAD)?;
    if frame.frame_type != FrameType::AUTH || !frame.is_sealed() {
        fail_auth(&mut stream);
        return Err(SecError::AuthFailed);
    }

    // Try every account's keys; no early exit.
    let mut opened: Option<(Arc<Account>, ChannelKeys, Vec<u8>)> = None;
    let mut trials = 0;
    for account in accounts.iter() {
        trials += 1;
        let mut keys = derive_keys(&account.psk, &hello.nonce, &welcome.nonce, Role::Server);
        if let Ok(plain) = keys.open(&frame.payload) {
            if opened.is_none() {
                opened = Some((account.clone(), keys, plain));
            }
        }
    }
    if trials == 0 {
        let mut dummy = [0u8; 32];
        rand::thread_rng().fill_bytes(&mut dummy);
        let _ = derive_keys(&dummy, &hello.nonce, &welcome.nonce, Role::Server).open(&frame.payload);
    }

    let verified = opened.and_then(|(account, keys, plain)| {
        let credential = FieldMap::decode(&plain).ok().and_then(|m| Credential::from_fields(&m).ok())?;
        let authed = authenticate(&credential, accounts, &hello.nonce, &welcome.nonce).ok()?;
        Arc::ptr_eq(&authed, &account).then_some((account, keys))
    });
    let Some((account, mut keys)) = verified else {
        fail_auth(&mut stream);
        return Err(SecError::AuthFailed);
    };

    let account_type = if account.is_administrator() { 1 } else { 0 };
    let ok = FieldMap::new()
        .with_str(tags::auth::USERNAME, &account.username)
        .with_u8(tags::auth::ACCOUNT_TYPE, account_type);
    let sealed = keys.seal(&ok.encode())?;
    crate::wire::write_frame(
        &mut stream,
        &Frame {
            frame_type: FrameType::AUTH_OK,
            flags: FLAG_SEALED,
            payload: sealed,
        },
        DEFAULT_MAX_PAYLOAD,
    )?;
    let params = welcome.params;
    Ok(Accepted {
        channel: SecureChannel::new(stream, keys, params.security_mode, max_payload_for(params.buffer_size)),
        params,
        hello,
        account,
    })
}

fn fail_auth<S: Write>(stream: &mut S) {
    let _ = crate::wire::write_frame(stream, &Frame::empty(FrameType::AUTH_FAIL), DEFAULT_MAX_PAYLOAD);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perms::PermissionDoc;
    use crate::wire::{Mode, SecurityMode};
    use std::net::TcpListener;
    use std::path::PathBuf;
    use std::thread;

    fn accounts() -> AccountSet {
        let mut set = AccountSet::default();
        for (name, psk) in [("alice", b"alice-secret-key".to_vec()), ("bob", b"bob-secret-key!!".to_vec())] {
            set.insert(Account {
                username: name.into(),
                psk,
                sandbox_root: PathBuf::from("/tmp"),
                perms: PermissionDoc::deny_all(),
            });
        }
        set
    }

    fn run(creds: Credentials, security: SecurityMode) -> (Result<ClientSession<TcpStream>, SecError>, Result<String, SecError>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            accept(stream, &ServerPolicy::default(), &accounts()).map(|a| a.account.username.clone())
        });
        let params = SessionParams::request(Mode::Dfsm, security, 65_536, 1);
        let client = connect(addr, &creds, params, None);
        (client, server.join().unwrap())
    }

    #[test]
    fn valid_proof_authenticates() {
        let creds = Credentials {
            username: "alice".into(),
            psk: b"alice-secret-key".to_vec(),
        };
        let (client, server) = run(creds, SecurityMode::NonSecure);
        assert_eq!(server.unwrap(), "alice");
        assert_eq!(client.unwrap().account_type, AccountType::Others);
    }

    #[test]
    fn wrong_psk_fails() {
        let creds = Credentials {
            username: "alice".into(),
            psk: b"not-the-key".to_vec(),
        };
        let (client, server) = run(creds, SecurityMode::Secure);
        assert!(matches!(client, Err(SecError::AuthFailed)));
        assert!(matches!(server, Err(SecError::AuthFailed)));
    }

    #[test]
    fn unknown_user_fails() {
        let creds = Credentials {
            username: "mallory".into(),
            psk: b"alice-secret-key".to_vec(),
        };
        let (client, server) = run(creds, SecurityMode::SemiSecure);
        assert!(matches!(client, Err(SecError::AuthFailed)));
        assert!(matches!(server, Err(SecError::AuthFailed)));
    }

    #[test]
    fn authenticate_checks_proof() {
        let set = accounts();
        let creds = Credentials {
            username: "bob".into(),
            psk: b"bob-secret-key!!".to_vec(),
        };
        let cred = Credential::new(&creds, &[1; 16], &[2; 16]);
        assert_eq!(authenticate(&cred, &set, &[1; 16], &[2; 16]).unwrap().username, "bob");
        assert!(authenticate(&cred, &set, &[1; 16], &[3; 16]).is_err());
        let ghost = Credential {
            username: "ghost".into(),
            proof: cred.proof,
        };
        assert!(matches!(authenticate(&ghost, &set, &[1; 16], &[2; 16]), Err(SecError::AuthFailed)));
    }

    #[test]
    fn second_auth_is_protocol_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut acc = accept(stream, &ServerPolicy::default(), &accounts()).unwrap();
            acc.channel.recv().map(|_| ())
        });
        let creds = Credentials {
            username: "bob".into(),
            psk: b"bob-secret-key!!".to_vec(),
        };
        let params = SessionParams::request(Mode::Task, SecurityMode::Secure, 65_536, 1);
        let mut session = connect(addr, &creds, params, None).unwrap();
        let frame = Frame {
            frame_type: FrameType::AUTH,
            flags: FLAG_SEALED,
            payload: vec![0; 48],
        };
        crate::wire::write_frame(session.channel.get_mut(), &frame, DEFAULT_MAX_PAYLOAD).unwrap();
        assert!(matches!(server.join().unwrap(), Err(SecError::Protocol(_))));
    }

    #[test]
    fn sensitive_fields_hidden_and_restored() {
        use crate::wire::tags::dfs;
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut acc = accept(stream, &ServerPolicy::default(), &accounts()).unwrap();
            acc.channel.expect(FrameType::DFS_REQ).unwrap()
        });
        let creds = Credentials {
            username: "bob".into(),
            psk: b"bob-secret-key!!".to_vec(),
        };
        let params = SessionParams::request(Mode::Dfsm, SecurityMode::NonSecure, 65_536, 1);
        let mut session = connect(addr, &creds, params, None).unwrap();
        let req = FieldMap::new()
            .with_u8(dfs::OP, 1)
            .with_str(dfs::PATH, "secret/path.txt")
            .with_u64(dfs::OFFSET, 3);
        session.channel.send_fields(FrameType::DFS_REQ, &req).unwrap();
        let got = server.join().unwrap();
        assert_eq!(got.require_str(dfs::PATH).unwrap(), "secret/path.txt");
        assert_eq!(got.require_u64(dfs::OFFSET).unwrap(), 3);
        assert!(!got.contains(tags::SEALED_FIELDS));
    }
}
