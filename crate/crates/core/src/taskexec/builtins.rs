//! The fixed registry of built-in task functions.
//!
//! A built-in receives its parameter map and the set's work directory and
//! returns a result map. Paths are resolved inside the work directory only.

use std::path::Path;

use crate::perms::sandbox_relative;
use crate::wire::FieldMap;

/// Parameter and result tags.
pub mod tags {
    /// `pi_hex_digits`: 1-based start position (u64).
    pub const START: u8 = 1;
    /// `pi_hex_digits`: digit count (u64).
    pub const COUNT: u8 = 2;
    /// `pi_hex_digits` result: the digits as ASCII.
    pub const DIGITS: u8 = 3;
    /// `md5_file`: file name in the work directory.
    pub const NAME: u8 = 4;
    /// `md5_file` result: 16-byte digest.
    pub const MD5: u8 = 5;
    /// `md5_file` result: file size (u64).
    pub const SIZE: u8 = 6;
}

/// Largest digit count one `pi_hex_digits` call accepts.
pub const MAX_PI_DIGITS: u64 = 1 << 20;

type Builtin = fn(&FieldMap, &Path) -> Result<FieldMap, String>;

const REGISTRY: &[(&str, Builtin)] = &[
    ("pi_hex_digits", pi_hex_digits),
    ("md5_file", md5_file),
    ("echo", echo),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    REGISTRY.iter().map(|(n, _)| *n)
}

pub fn is_builtin(name: &str) -> bool {
    lookup(name).is_some()
}

fn lookup(name: &str) -> Option<Builtin> {
    REGISTRY.iter().find(|(n, _)| *n == name).map(|(_, f)| *f)
}

pub fn call(name: &str, params: &FieldMap, workdir: &Path) -> Result<FieldMap, String> {
    let f = lookup(name).ok_or_else(|| format!("unknown built-in {name:?}"))?;
    f(params, workdir)
}

/// Parameters for a `pi_hex_digits` task.
pub fn pi_params(start: u64, count: u64) -> FieldMap {
    FieldMap::new().with_u64(tags::START, start).with_u64(tags::COUNT, count)
}

fn pi_hex_digits(params: &FieldMap, _: &Path) -> Result<FieldMap, String> {
    let start = params.get_u64(tags::START).map_err(|e| e.to_string())?.unwrap_or(1);
    let count = params.require_u64(tags::COUNT).map_err(|e| e.to_string())?;
    if start == 0 {
        return Err("start is 1-based".into());
    }
    if count > MAX_PI_DIGITS || start.checked_add(count).is_none() {
        return Err(format!("count above {MAX_PI_DIGITS}"));
    }
    Ok(FieldMap::new().with_str(tags::DIGITS, &super::pi::pi_hex_digits(start, count)))
}

fn md5_file(params: &FieldMap, workdir: &Path) -> Result<FieldMap, String> {
    let name = params.require_str(tags::NAME).map_err(|e| e.to_string())?;
    let rel = sandbox_relative(name).ok_or_else(|| format!("{name:?} is outside the work directory"))?;
    let path = workdir.join(rel);
    let size = std::fs::metadata(&path).map_err(|e| format!("{name}: {e}"))?.len();
    let md5 = crate::ftsm::md5_file(&path).map_err(|e| format!("{name}: {e}"))?;
    Ok(FieldMap::new().with(tags::MD5, md5).with_u64(tags::SIZE, size))
}

fn echo(params: &FieldMap, _: &Path) -> Result<FieldMap, String> {
    Ok(params.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pi_entry() {
        let out = call("pi_hex_digits", &pi_params(1, 16), Path::new(".")).unwrap();
        assert_eq!(out.get_str(tags::DIGITS).unwrap(), Some("243F6A8885A308D3"));
        assert!(call("pi_hex_digits", &pi_params(0, 1), Path::new(".")).is_err());
    }

    #[test]
    fn md5_confined_to_workdir() {
        let root = tempfile::tempdir().unwrap();
        let a = root.path().join("a");
        let b = root.path().join("b");
        std::fs::create_dir_all(&a).unwrap();
        std::fs::create_dir_all(&b).unwrap();
        std::fs::write(b.join("secret"), b"x").unwrap();
        std::fs::write(a.join("mine"), b"").unwrap();

        let p = |n: &str| FieldMap::new().with_str(tags::NAME, n);
        let ok = call("md5_file", &p("mine"), &a).unwrap();
        assert_eq!(hex::encode(ok.get(tags::MD5).unwrap()), "d41d8cd98f00b204e9800998ecf8427e");
        assert!(call("md5_file", &p("../b/secret"), &a).unwrap_err().contains("outside"));
        assert!(call("md5_file", &p("/etc/passwd"), &a).is_err());
    }

    #[test]
    fn unknown_names() {
        assert!(!is_builtin("rm"));
        assert!(call("rm", &FieldMap::new(), Path::new(".")).is_err());
        assert_eq!(names().count(), 3);
    }
}
