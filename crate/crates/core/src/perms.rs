//! Per-account permission documents and the pre-execution permission gate.
//!
//! A permission document is a small XML file, one per account, in this form:
//!
//! ```xml
//! <?xml version="1.0" encoding="utf-8"?>
//! <permissions AccountType="Others">
//!   <UnmanagedCode value="True">Ability to call unmanaged code.</UnmanagedCode>
//!   <SocketPermission value="False"/>
//!   <Execution value="False"/>
//!   <FileIOPermission value="False"/>
//!   <RegistryPermission value="False"/>
//!   <SqlClientPermission value="True"/>
//! </permissions>
//! ```
//!
//! `Administrator` accounts bypass every check. For `Others` accounts a flag
//! that is absent from the document is treated as `False`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::io;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use log::warn;

#[derive(Debug, thiserror::Error)]
pub enum PermsError {
    #[error("malformed permission document: {0}")]
    MalformedDocument(String),
    #[error("unknown account type `{0}`")]
    UnknownAccountType(String),
    #[error("unknown permission flag `{0}`")]
    UnknownFlag(String),
    #[error("no such account `{0}`")]
    NoSuchAccount(String),
    #[error("invalid username `{0}`")]
    InvalidUsername(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AccountType {
    Administrator,
    Others,
}

impl AccountType {
    pub fn as_str(self) -> &'static str {
        match self {
            AccountType::Administrator => "Administrator",
            AccountType::Others => "Others",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PermissionFlag {
    UnmanagedCode,
    SocketPermission,
    Execution,
    FileIOPermission,
    RegistryPermission,
    SqlClientPermission,
}

impl PermissionFlag {
    /// Document order.
    pub const ALL: [PermissionFlag; 6] = [
        PermissionFlag::UnmanagedCode,
        PermissionFlag::SocketPermission,
        PermissionFlag::Execution,
        PermissionFlag::FileIOPermission,
        PermissionFlag::RegistryPermission,
        PermissionFlag::SqlClientPermission,
    ];

    pub fn element_name(self) -> &'static str {
        match self {
            PermissionFlag::UnmanagedCode => "UnmanagedCode",
            PermissionFlag::SocketPermission => "SocketPermission",
            PermissionFlag::Execution => "Execution",
            PermissionFlag::FileIOPermission => "FileIOPermission",
            PermissionFlag::RegistryPermission => "RegistryPermission",
            PermissionFlag::SqlClientPermission => "SqlClientPermission",
        }
    }

    pub fn from_name(name: &str) -> Option<PermissionFlag> {
        PermissionFlag::ALL
            .into_iter()
            .find(|f| f.element_name().eq_ignore_ascii_case(name))
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for PermissionFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.element_name())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlagValue {
    pub allowed: bool,
    pub description: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermissionDoc {
    pub account_type: AccountType,
    flags: [FlagValue; 6],
}

impl PermissionDoc {
    /// An `Others` document with every flag denied.
    pub fn deny_all() -> Self {
        PermissionDoc {
            account_type: AccountType::Others,
            flags: Default::default(),
        }
    }

    pub fn administrator() -> Self {
        PermissionDoc {
            account_type: AccountType::Administrator,
            flags: Default::default(),
        }
    }

    pub fn allows(&self, flag: PermissionFlag) -> bool {
        self.flags[flag.index()].allowed
    }

    pub fn flag(&self, flag: PermissionFlag) -> &FlagValue {
        &self.flags[flag.index()]
    }

    pub fn set(&mut self, flag: PermissionFlag, allowed: bool) {
        self.flags[flag.index()].allowed = allowed;
    }

    pub fn with(mut self, flag: PermissionFlag, allowed: bool) -> Self {
        self.set(flag, allowed);
        self
    }

    pub fn is_administrator(&self) -> bool {
        self.account_type == AccountType::Administrator
    }
}

fn parse_bool(raw: &str) -> Option<bool> {
    if raw.trim().eq_ignore_ascii_case("true") {
        Some(true)
    } else if raw.trim().eq_ignore_ascii_case("false") {
        Some(false)
    } else {
        None
    }
}

pub fn parse_permissions(xml: &str) -> Result<PermissionDoc, PermsError> {
    let tree = roxmltree::Document::parse(xml).map_err(|e| PermsError::MalformedDocument(e.to_string()))?;
    let root = tree.root_element();
    if root.tag_name().name() != "permissions" {
        return Err(PermsError::MalformedDocument(format!(
            "root element is <{}>, expected <permissions>",
            root.tag_name().name()
        )));
    }
    let account_type = match root.attribute("AccountType").map(str::trim) {
        Some(t) if t.eq_ignore_ascii_case("Administrator") => AccountType::Administrator,
        Some(t) if t.eq_ignore_ascii_case("Others") => AccountType::Others,
        Some(t) => return Err(PermsError::UnknownAccountType(t.to_string())),
        None => return Err(PermsError::MalformedDocument("missing AccountType attribute".into())),
    };
    let mut doc = PermissionDoc {
        account_type,
        flags: Default::default(),
    };
    for element in root.children().filter(|n| n.is_element()) {
        let name = element.tag_name().name();
        let Some(flag) = PermissionFlag::from_name(name) else {
            warn!("ignoring unknown permission element <{name}>");
            continue;
        };
        let allowed = match element.attribute("value") {
            Some(v) => parse_bool(v).ok_or_else(|| {
                PermsError::MalformedDocument(format!("<{name}> value `{v}` is not True or False"))
            })?,
            None => false,
        };
        let text: String = element
            .children()
            .filter(|n| n.is_text())
            .filter_map(|n| n.text())
            .collect();
        let text = text.trim();
        doc.flags[flag.index()] = FlagValue {
            allowed,
            description: (!text.is_empty()).then(|| text.to_string()),
        };
    }
    Ok(doc)
}

fn escape_xml(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

/// Emits every flag element in fixed order.
pub fn serialize_permissions(doc: &PermissionDoc) -> String {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"utf-8\"?>\n");
    let _ = writeln!(out, "<permissions AccountType=\"{}\">", doc.account_type.as_str());
    for flag in PermissionFlag::ALL {
        let value = doc.flag(flag);
        let v = if value.allowed { "True" } else { "False" };
        match &value.description {
            Some(text) => {
                let _ = writeln!(
                    out,
                    "  <{0} value=\"{1}\">{2}</{0}>",
                    flag.element_name(),
                    v,
                    escape_xml(text)
                );
            }
            None => {
                let _ = writeln!(out, "  <{} value=\"{}\"/>", flag.element_name(), v);
            }
        }
    }
    out.push_str("</permissions>\n");
    out
}

/// Rejects absolute paths, `..`, and other components that could leave a
/// sandbox, returning the normalized relative path.
pub fn sandbox_relative(path: &str) -> Option<PathBuf> {
    if path.is_empty() || path.contains('\0') || path.contains('\\') {
        return None;
    }
    let mut out = PathBuf::new();
    for component in Path::new(path).components() {
        match component {
            Component::Normal(part) => out.push(part),
            Component::CurDir => {}
            Component::ParentDir | Component::RootDir | Component::Prefix(_) => return None,
        }
    }
    (!out.as_os_str().is_empty()).then_some(out)
}

#[derive(Clone, Debug)]
pub struct Account {
    pub username: String,
    pub psk: Vec<u8>,
    pub sandbox_root: PathBuf,
    pub perms: PermissionDoc,
}

impl Account {
    pub fn is_administrator(&self) -> bool {
        self.perms.is_administrator()
    }

    /// Resolves a client path inside this account's sandbox.
    pub fn resolve(&self, path: &str) -> Option<PathBuf> {
        sandbox_relative(path).map(|rel| self.sandbox_root.join(rel))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActionKind {
    FileIo,
    Execution,
    Socket,
    Unmanaged,
    Registry,
    Sql,
}

impl ActionKind {
    pub fn flag(self) -> PermissionFlag {
        match self {
            ActionKind::FileIo => PermissionFlag::FileIOPermission,
            ActionKind::Execution => PermissionFlag::Execution,
            ActionKind::Socket => PermissionFlag::SocketPermission,
            ActionKind::Unmanaged => PermissionFlag::UnmanagedCode,
            ActionKind::Registry => PermissionFlag::RegistryPermission,
            ActionKind::Sql => PermissionFlag::SqlClientPermission,
        }
    }
}

/// One operation that must pass [`check`] before it takes effect.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GuardedAction {
    pub kind: ActionKind,
    /// Sandbox-relative path for file actions, a task description otherwise.
    pub resource: String,
}

impl GuardedAction {
    pub fn file_io(path: impl Into<String>) -> Self {
        GuardedAction {
            kind: ActionKind::FileIo,
            resource: path.into(),
        }
    }

    pub fn new(kind: ActionKind, resource: impl Into<String>) -> Self {
        GuardedAction {
            kind,
            resource: resource.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny(String),
}

impl Decision {
    pub fn is_allowed(&self) -> bool {
        matches!(self, Decision::Allow)
    }
}

pub fn check(account: &Account, action: &GuardedAction) -> Decision {
    if account.is_administrator() {
        return Decision::Allow;
    }
    let flag = action.kind.flag();
    if !account.perms.allows(flag) {
        return Decision::Deny(flag.element_name().to_string());
    }
    if action.kind == ActionKind::FileIo && sandbox_relative(&action.resource).is_none() {
        return Decision::Deny("sandbox escape".to_string());
    }
    Decision::Allow
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AuditEvent {
    Check {
        username: String,
        action: GuardedAction,
        allowed: bool,
    },
    Effect {
        username: String,
        action: GuardedAction,
    },
}

/// Records checks and the effects they guard, in order. Used by tests to
/// confirm that nothing executes before its check.
#[derive(Debug, Default)]
pub struct AuditLog {
    events: Mutex<Vec<AuditEvent>>,
}

impl AuditLog {
    pub fn record(&self, event: AuditEvent) {
        self.events.lock().unwrap().push(event);
    }

    pub fn events(&self) -> Vec<AuditEvent> {
        self.events.lock().unwrap().clone()
    }

    /// Every effect is preceded by an allowed check of the same action for
    /// the same user.
    pub fn checks_precede_effects(&self) -> bool {
        let events = self.events.lock().unwrap();
        events.iter().enumerate().all(|(i, event)| match event {
            AuditEvent::Effect { username, action } => events[..i].iter().any(|prior| {
                matches!(prior, AuditEvent::Check { username: u, action: a, allowed: true } if u == username && a == action)
            }),
            AuditEvent::Check { .. } => true,
        })
    }
}

/// Applies [`check`] and records the outcome when an audit log is attached.
#[derive(Clone, Default)]
pub struct Gate {
    audit: Option<Arc<AuditLog>>,
}

impl Gate {
    pub fn new(audit: Option<Arc<AuditLog>>) -> Self {
        Gate { audit }
    }

    pub fn check(&self, account: &Account, action: &GuardedAction) -> Decision {
        let decision = check(account, action);
        if let Some(log) = &self.audit {
            log.record(AuditEvent::Check {
                username: account.username.clone(),
                action: action.clone(),
                allowed: decision.is_allowed(),
            });
        }
        decision
    }

    pub fn effect(&self, account: &Account, action: &GuardedAction) {
        if let Some(log) = &self.audit {
            log.record(AuditEvent::Effect {
                username: account.username.clone(),
                action: action.clone(),
            });
        }
    }
}

/// Reserved username that is always an Administrator, with or without a
/// permission document.
pub const ADMIN_USERNAME: &str = "admin";

pub fn valid_username(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 64
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && name != "."
        && name != ".."
}

/// Immutable snapshot of all accounts a node knows.
#[derive(Clone, Debug, Default)]
pub struct AccountSet {
    accounts: BTreeMap<String, Arc<Account>>,
}

impl AccountSet {
    pub fn get(&self, username: &str) -> Option<&Arc<Account>> {
        self.accounts.get(username)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<Account>> {
        self.accounts.values()
    }

    pub fn len(&self) -> usize {
        self.accounts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accounts.is_empty()
    }

    pub fn insert(&mut self, account: Account) {
        self.accounts.insert(account.username.clone(), Arc::new(account));
    }
}

/// Parses the credential file: one `username:hex(psk)` per line. Blank lines
/// and `#` comments are skipped; a repeated username keeps the later line.
pub fn parse_credentials(text: &str) -> BTreeMap<String, Vec<u8>> {
    let mut creds = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((user, psk_hex)) = line.split_once(':') else {
            warn!("credentials line {}: expected username:hex(psk)", lineno + 1);
            continue;
        };
        let user = user.trim();
        if !valid_username(user) {
            warn!("credentials line {}: invalid username `{user}`", lineno + 1);
            continue;
        }
        match hex::decode(psk_hex.trim()) {
            Ok(psk) if !psk.is_empty() => {
                if creds.insert(user.to_string(), psk).is_some() {
                    warn!("credentials line {}: duplicate user `{user}`, later line wins", lineno + 1);
                }
            }
            _ => warn!("credentials line {}: psk is not non-empty hex", lineno + 1),
        }
    }
    creds
}

/// Loads `<accounts_dir>/<user>.xml` documents and the credential file into
/// an account set. Malformed documents are skipped with a warning. Accounts
/// need both a credential line and a document, except [`ADMIN_USERNAME`].
pub fn load_accounts(accounts_dir: &Path, credentials: &Path, storage_root: &Path) -> Result<AccountSet, PermsError> {
    let creds = match fs::read_to_string(credentials) {
        Ok(text) => parse_credentials(&text),
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            warn!("credential file {} not found; no accounts loaded", credentials.display());
            BTreeMap::new()
        }
        Err(e) => return Err(e.into()),
    };

    let mut docs: BTreeMap<String, PermissionDoc> = BTreeMap::new();
    if accounts_dir.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(accounts_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("xml"))
            })
            .collect();
        entries.sort();
        for path in entries {
            let Some(user) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let parsed = fs::read_to_string(&path)
                .map_err(PermsError::from)
                .and_then(|text| parse_permissions(&text));
            match parsed {
                Ok(doc) => {
                    if docs.insert(user.to_string(), doc).is_some() {
                        warn!("duplicate permission document for `{user}`; {} wins", path.display());
                    }
                }
                Err(e) => warn!("skipping {}: {e}", path.display()),
            }
        }
    }

    let mut set = AccountSet::default();
    for (user, psk) in creds {
        let perms = match docs.remove(&user) {
            Some(doc) => doc,
            None if user == ADMIN_USERNAME => PermissionDoc::administrator(),
            None => {
                warn!("account `{user}` has no permission document; not loaded");
                continue;
            }
        };
        let sandbox_root = if perms.is_administrator() {
            storage_root.to_path_buf()
        } else {
            storage_root.join(&user)
        };
        fs::create_dir_all(&sandbox_root)?;
        set.insert(Account {
            username: user,
            psk,
            sandbox_root,
            perms,
        });
    }
    for user in docs.keys() {
        warn!("permission document for `{user}` has no credential line; ignored");
    }
    Ok(set)
}

/// Shared, atomically replaceable account snapshot.
#[derive(Debug, Default)]
pub struct AccountStore {
    snapshot: RwLock<Arc<AccountSet>>,
}

impl AccountStore {
    pub fn new(set: AccountSet) -> Self {
        AccountStore {
            snapshot: RwLock::new(Arc::new(set)),
        }
    }

    pub fn snapshot(&self) -> Arc<AccountSet> {
        self.snapshot.read().unwrap().clone()
    }

    pub fn replace(&self, set: AccountSet) {
        *self.snapshot.write().unwrap() = Arc::new(set);
    }
}

/// Adds (or replaces) a credential line and writes a permission document
/// when none exists. Returns the generated psk.
pub fn add_account(
    accounts_dir: &Path,
    credentials: &Path,
    username: &str,
    doc: &PermissionDoc,
    psk: Option<Vec<u8>>,
) -> Result<Vec<u8>, PermsError> {
    use rand::RngCore;
    if !valid_username(username) {
        return Err(PermsError::InvalidUsername(username.to_string()));
    }
    let psk = psk.unwrap_or_else(|| {
        let mut k = vec![0u8; 32];
        rand::thread_rng().fill_bytes(&mut k);
        k
    });
    let existing = match fs::read_to_string(credentials) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(e.into()),
    };
    let mut lines: Vec<String> = existing
        .lines()
        .filter(|l| l.split_once(':').map(|(u, _)| u.trim()) != Some(username))
        .map(str::to_string)
        .collect();
    lines.push(format!("{username}:{}", hex::encode(&psk)));
    if let Some(parent) = credentials.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(credentials, lines.join("\n") + "\n")?;
    fs::create_dir_all(accounts_dir)?;
    fs::write(accounts_dir.join(format!("{username}.xml")), serialize_permissions(doc))?;
    Ok(psk)
}

pub fn read_account_doc(accounts_dir: &Path, username: &str) -> Result<PermissionDoc, PermsError> {
    let path = accounts_dir.join(format!("{username}.xml"));
    match fs::read_to_string(&path) {
        Ok(text) => parse_permissions(&text),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Err(PermsError::NoSuchAccount(username.to_string())),
        Err(e) => Err(e.into()),
    }
}

pub fn set_permission(accounts_dir: &Path, username: &str, flag: PermissionFlag, allowed: bool) -> Result<PermissionDoc, PermsError> {
    let mut doc = read_account_doc(accounts_dir, username)?;
    doc.set(flag, allowed);
    fs::write(accounts_dir.join(format!("{username}.xml")), serialize_permissions(&doc))?;
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const SAMPLE_DOC: &str = r#"<?xml version="1.0" encoding="utf-8"?>
<permissions AccountType="Others">
  <UnmanagedCode value="True">
Ability to call unmanaged code.
  </UnmanagedCode>
  <SocketPermission value="False"/>
  <Execution value="False"/>
  <FileIOPermission value="False">
Controls the ability to access files and folders.</FileIOPermission >
  <RegistryPermission value="False"/>
  <SqlClientPermission value="True"/>
</permissions>
"#;

    fn others(doc: PermissionDoc) -> Account {
        Account {
            username: "alice".into(),
            psk: vec![1; 32],
            sandbox_root: PathBuf::from("/srv/alice"),
            perms: doc,
        }
    }

    #[test]
    fn sample_document_flags() {
        let doc = parse_permissions(SAMPLE_DOC).unwrap();
        assert_eq!(doc.account_type, AccountType::Others);
        let expected = [true, false, false, false, false, true];
        for (flag, want) in PermissionFlag::ALL.into_iter().zip(expected) {
            assert_eq!(doc.allows(flag), want, "{flag}");
        }
        assert_eq!(
            doc.flag(PermissionFlag::UnmanagedCode).description.as_deref(),
            Some("Ability to call unmanaged code.")
        );
        assert_eq!(
            doc.flag(PermissionFlag::FileIOPermission).description.as_deref(),
            Some("Controls the ability to access files and folders.")
        );
    }

    #[test]
    fn absent_flag_defaults_to_false() {
        let doc = parse_permissions(r#"<permissions AccountType="Others"><Execution value="true"/></permissions>"#).unwrap();
        assert!(doc.allows(PermissionFlag::Execution));
        assert!(!doc.allows(PermissionFlag::SocketPermission));
    }

    #[test]
    fn administrator_allows_everything() {
        let doc = parse_permissions(r#"<permissions AccountType="Administrator"/>"#).unwrap();
        let admin = others(doc);
        for kind in [ActionKind::FileIo, ActionKind::Execution, ActionKind::Socket, ActionKind::Sql] {
            assert_eq!(check(&admin, &GuardedAction::new(kind, "../anything")), Decision::Allow);
        }
    }

    #[test]
    fn malformed_and_unknown_type() {
        assert!(matches!(parse_permissions("<permissions"), Err(PermsError::MalformedDocument(_))));
        assert!(matches!(
            parse_permissions(r#"<permissions AccountType="Root"/>"#),
            Err(PermsError::UnknownAccountType(t)) if t == "Root"
        ));
        assert!(matches!(
            parse_permissions(r#"<permissions AccountType="Others"><Execution value="maybe"/></permissions>"#),
            Err(PermsError::MalformedDocument(_))
        ));
    }

    #[test]
    fn serialize_is_idempotent_normalization() {
        let first = parse_permissions(SAMPLE_DOC).unwrap();
        let text = serialize_permissions(&first);
        let second = parse_permissions(&text).unwrap();
        assert_eq!(first, second);
        assert_eq!(serialize_permissions(&second), text);
    }

    #[test]
    fn execution_denied_by_sample() {
        let account = others(parse_permissions(SAMPLE_DOC).unwrap());
        assert_eq!(
            check(&account, &GuardedAction::new(ActionKind::Execution, "task")),
            Decision::Deny("Execution".into())
        );
    }

    #[test]
    fn file_io_respects_sandbox() {
        let account = others(PermissionDoc::deny_all().with(PermissionFlag::FileIOPermission, true));
        assert!(check(&account, &GuardedAction::file_io("data/out.bin")).is_allowed());
        assert_eq!(
            check(&account, &GuardedAction::file_io("../etc")),
            Decision::Deny("sandbox escape".into())
        );
        assert!(!check(&account, &GuardedAction::file_io("/etc/passwd")).is_allowed());
    }

    #[test]
    fn sandbox_relative_normalizes() {
        assert_eq!(sandbox_relative("./a/./b"), Some(PathBuf::from("a/b")));
        assert_eq!(sandbox_relative("a/../b"), None);
        assert_eq!(sandbox_relative(""), None);
        assert_eq!(sandbox_relative("."), None);
    }

    #[test]
    fn credentials_last_line_wins() {
        let creds = parse_credentials("# c\nalice:0102\nbob:zz\nalice:0304\n");
        assert_eq!(creds.get("alice"), Some(&vec![3, 4]));
        assert!(!creds.contains_key("bob"));
    }

    #[test]
    fn empty_accounts_dir_serves_only_admin() {
        let dir = tempfile::tempdir().unwrap();
        let accounts = dir.path().join("accounts");
        fs::create_dir_all(&accounts).unwrap();
        let creds = dir.path().join("credentials");
        fs::write(&creds, "admin:00ff\nalice:0102\n").unwrap();
        let set = load_accounts(&accounts, &creds, &dir.path().join("storage")).unwrap();
        assert_eq!(set.len(), 1);
        assert!(set.get("admin").unwrap().is_administrator());
    }

    #[test]
    fn duplicate_documents_later_file_wins() {
        let dir = tempfile::tempdir().unwrap();
        let accounts = dir.path().join("accounts");
        fs::create_dir_all(&accounts).unwrap();
        fs::write(accounts.join("alice.XML"), serialize_permissions(&PermissionDoc::deny_all())).unwrap();
        fs::write(
            accounts.join("alice.xml"),
            serialize_permissions(&PermissionDoc::deny_all().with(PermissionFlag::Execution, true)),
        )
        .unwrap();
        fs::write(accounts.join("broken.xml"), "<permissions").unwrap();
        let creds = dir.path().join("credentials");
        fs::write(&creds, "alice:0102\nbroken:0102\n").unwrap();
        let set = load_accounts(&accounts, &creds, &dir.path().join("storage")).unwrap();
        assert_eq!(set.len(), 1);
        // "alice.xml" sorts after "alice.XML".
        assert!(set.get("alice").unwrap().perms.allows(PermissionFlag::Execution));
    }

    #[test]
    fn gate_records_check_before_effect() {
        let log = Arc::new(AuditLog::default());
        let gate = Gate::new(Some(log.clone()));
        let account = others(PermissionDoc::deny_all().with(PermissionFlag::FileIOPermission, true));
        let action = GuardedAction::file_io("x");
        gate.effect(&account, &action);
        assert!(!log.checks_precede_effects());
        let log = Arc::new(AuditLog::default());
        let gate = Gate::new(Some(log.clone()));
        assert!(gate.check(&account, &action).is_allowed());
        gate.effect(&account, &action);
        assert!(log.checks_precede_effects());
    }

    #[test]
    fn add_and_set_perm() {
        let dir = tempfile::tempdir().unwrap();
        let accounts = dir.path().join("accounts");
        let creds = dir.path().join("credentials");
        add_account(&accounts, &creds, "alice", &PermissionDoc::deny_all(), Some(vec![7; 16])).unwrap();
        set_permission(&accounts, "alice", PermissionFlag::Execution, true).unwrap();
        let set = load_accounts(&accounts, &creds, &dir.path().join("storage")).unwrap();
        let alice = set.get("alice").unwrap();
        assert_eq!(alice.psk, vec![7; 16]);
        assert!(alice.perms.allows(PermissionFlag::Execution));
        assert!(alice.sandbox_root.ends_with("storage/alice"));
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn administrator_ignores_flags(bits in any::<[bool; 6]>(), kind_idx in 0usize..6, resource in ".{0,20}") {
            let mut doc = PermissionDoc::administrator();
            for (flag, b) in PermissionFlag::ALL.into_iter().zip(bits) {
                doc.set(flag, b);
            }
            let kinds = [ActionKind::FileIo, ActionKind::Execution, ActionKind::Socket, ActionKind::Unmanaged, ActionKind::Registry, ActionKind::Sql];
            let account = Account { username: "root".into(), psk: vec![], sandbox_root: PathBuf::from("/"), perms: doc };
            prop_assert_eq!(check(&account, &GuardedAction::new(kinds[kind_idx], resource)), Decision::Allow);
        }

        #[test]
        fn serialize_round_trips(bits in any::<[bool; 6]>(), admin in any::<bool>(), text in "[a-zA-Z<>&\" ]{0,12}") {
            let mut doc = if admin { PermissionDoc::administrator() } else { PermissionDoc::deny_all() };
            for (flag, b) in PermissionFlag::ALL.into_iter().zip(bits) {
                doc.set(flag, b);
            }
            let trimmed = text.trim();
            if !trimmed.is_empty() {
                doc.flags[0].description = Some(trimmed.to_string());
            }
            let parsed = parse_permissions(&serialize_permissions(&doc)).unwrap();
            prop_assert_eq!(parsed, doc);
        }
    }
}
