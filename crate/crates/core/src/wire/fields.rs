use super::WireError;

/// Tag-length-value map used as the payload of every control frame.
///
/// Each entry encodes as `tag(1) | value_len(4, big-endian) | value`. Tags are
/// unique; consumers ignore tags they do not know.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FieldMap {
    fields: Vec<(u8, Vec<u8>)>,
}

impl FieldMap {
    pub fn new() -> Self {
        FieldMap::default()
    }

    /// Sets `tag`, replacing any previous value in place.
    pub fn insert(&mut self, tag: u8, value: impl Into<Vec<u8>>) -> &mut Self {
        let value = value.into();
        match self.fields.iter_mut().find(|(t, _)| *t == tag) {
            Some(slot) => slot.1 = value,
            None => self.fields.push((tag, value)),
        }
        self
    }

    pub fn with(mut self, tag: u8, value: impl Into<Vec<u8>>) -> Self {
        self.insert(tag, value);
        self
    }

    pub fn with_u8(self, tag: u8, v: u8) -> Self {
        self.with(tag, [v])
    }

    pub fn with_u16(self, tag: u8, v: u16) -> Self {
        self.with(tag, v.to_be_bytes())
    }

    pub fn with_u32(self, tag: u8, v: u32) -> Self {
        self.with(tag, v.to_be_bytes())
    }

    pub fn with_u64(self, tag: u8, v: u64) -> Self {
        self.with(tag, v.to_be_bytes())
    }

    pub fn with_str(self, tag: u8, v: &str) -> Self {
        self.with(tag, v.as_bytes())
    }

    pub fn with_map(self, tag: u8, v: &FieldMap) -> Self {
        self.with(tag, v.encode())
    }

    pub fn remove(&mut self, tag: u8) -> Option<Vec<u8>> {
        let idx = self.fields.iter().position(|(t, _)| *t == tag)?;
        Some(self.fields.remove(idx).1)
    }

    pub fn contains(&self, tag: u8) -> bool {
        self.get(tag).is_some()
    }

    pub fn get(&self, tag: u8) -> Option<&[u8]> {
        self.fields
            .iter()
            .find(|(t, _)| *t == tag)
            .map(|(_, v)| v.as_slice())
    }

    pub fn require(&self, tag: u8) -> Result<&[u8], WireError> {
        self.get(tag).ok_or(WireError::MissingField(tag))
    }

    fn fixed<const N: usize>(&self, tag: u8) -> Result<Option<[u8; N]>, WireError> {
        match self.get(tag) {
            None => Ok(None),
            Some(v) => v
                .try_into()
                .map(Some)
                .map_err(|_| WireError::BadField { tag, reason: "wrong width" }),
        }
    }

    pub fn get_u8(&self, tag: u8) -> Result<Option<u8>, WireError> {
        Ok(self.fixed::<1>(tag)?.map(|b| b[0]))
    }

    pub fn get_u16(&self, tag: u8) -> Result<Option<u16>, WireError> {
        Ok(self.fixed::<2>(tag)?.map(u16::from_be_bytes))
    }

    pub fn get_u32(&self, tag: u8) -> Result<Option<u32>, WireError> {
        Ok(self.fixed::<4>(tag)?.map(u32::from_be_bytes))
    }

    pub fn get_u64(&self, tag: u8) -> Result<Option<u64>, WireError> {
        Ok(self.fixed::<8>(tag)?.map(u64::from_be_bytes))
    }

    pub fn get_array<const N: usize>(&self, tag: u8) -> Result<Option<[u8; N]>, WireError> {
        self.fixed::<N>(tag)
    }

    pub fn get_str(&self, tag: u8) -> Result<Option<&str>, WireError> {
        match self.get(tag) {
            None => Ok(None),
            Some(v) => std::str::from_utf8(v)
                .map(Some)
                .map_err(|_| WireError::BadField { tag, reason: "invalid UTF-8" }),
        }
    }

    pub fn get_map(&self, tag: u8) -> Result<Option<FieldMap>, WireError> {
        self.get(tag).map(FieldMap::decode).transpose()
    }

    pub fn require_u8(&self, tag: u8) -> Result<u8, WireError> {
        self.get_u8(tag)?.ok_or(WireError::MissingField(tag))
    }

    pub fn require_u16(&self, tag: u8) -> Result<u16, WireError> {
        self.get_u16(tag)?.ok_or(WireError::MissingField(tag))
    }

    pub fn require_u32(&self, tag: u8) -> Result<u32, WireError> {
        self.get_u32(tag)?.ok_or(WireError::MissingField(tag))
    }

    pub fn require_u64(&self, tag: u8) -> Result<u64, WireError> {
        self.get_u64(tag)?.ok_or(WireError::MissingField(tag))
    }

    pub fn require_array<const N: usize>(&self, tag: u8) -> Result<[u8; N], WireError> {
        self.fixed::<N>(tag)?.ok_or(WireError::MissingField(tag))
    }

    pub fn require_str(&self, tag: u8) -> Result<&str, WireError> {
        self.get_str(tag)?.ok_or(WireError::MissingField(tag))
    }

    pub fn require_map(&self, tag: u8) -> Result<FieldMap, WireError> {
        self.get_map(tag)?.ok_or(WireError::MissingField(tag))
    }

    pub fn iter(&self) -> impl Iterator<Item = (u8, &[u8])> {
        self.fields.iter().map(|(t, v)| (*t, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn encoded_len(&self) -> usize {
        self.fields.iter().map(|(_, v)| 5 + v.len()).sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        for (tag, value) in &self.fields {
            out.push(*tag);
            out.extend_from_slice(&(value.len() as u32).to_be_bytes());
            out.extend_from_slice(value);
        }
        out
    }

    pub fn decode(mut bytes: &[u8]) -> Result<FieldMap, WireError> {
        let mut map = FieldMap::new();
        while !bytes.is_empty() {
            if bytes.len() < 5 {
                return Err(WireError::MalformedFields("truncated field header"));
            }
            let tag = bytes[0];
            let len = u32::from_be_bytes([bytes[1], bytes[2], bytes[3], bytes[4]]) as usize;
            let rest = &bytes[5..];
            if rest.len() < len {
                return Err(WireError::MalformedFields("field value overruns payload"));
            }
            if map.contains(tag) {
                return Err(WireError::DuplicateTag(tag));
            }
            map.fields.push((tag, rest[..len].to_vec()));
            bytes = &rest[len..];
        }
        Ok(map)
    }
}

/// Encodes a list of byte strings as a field map keyed by position; used for
/// small arrays nested inside a field.
pub fn encode_list<T: AsRef<[u8]>>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(items.len() as u32).to_be_bytes());
    for item in items {
        let item = item.as_ref();
        out.extend_from_slice(&(item.len() as u32).to_be_bytes());
        out.extend_from_slice(item);
    }
    out
}

pub fn decode_list(mut bytes: &[u8]) -> Result<Vec<Vec<u8>>, WireError> {
    let bad = WireError::MalformedFields("malformed list");
    if bytes.len() < 4 {
        return Err(bad);
    }
    let count = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    bytes = &bytes[4..];
    // Each element needs at least its 4-byte length prefix.
    if count > bytes.len() / 4 {
        return Err(bad);
    }
    let mut items = Vec::with_capacity(count);
    for _ in 0..count {
        if bytes.len() < 4 {
            return Err(bad);
        }
        let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
        bytes = &bytes[4..];
        if bytes.len() < len {
            return Err(bad);
        }
        items.push(bytes[..len].to_vec());
        bytes = &bytes[len..];
    }
    if !bytes.is_empty() {
        return Err(bad);
    }
    Ok(items)
}
