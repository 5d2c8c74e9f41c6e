use std::fmt::Write as _;

use crate::wire::{decode_list, encode_list, FieldMap, WireError};

mod tag {
    pub const SCENARIO: u8 = 1;
    pub const PARAMS: u8 = 2;
    pub const BYTES: u8 = 3;
    pub const SECONDS: u8 = 4;
    pub const MBPS: u8 = 5;
    pub const PASS: u8 = 6;
    pub const REPEATS: u8 = 7;
    pub const DETAIL: u8 = 8;
    pub const PER_STREAM: u8 = 9;
}

/// One run of one scenario at one parameter point. `seconds` and `mbps` are
/// means over `repeats`; they are the only fields that vary between runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub scenario: String,
    pub params: String,
    pub bytes: u64,
    pub seconds: f64,
    pub mbps: f64,
    pub pass: bool,
    pub repeats: u32,
    pub detail: String,
    /// Bytes per stream for transfer runs; empty otherwise.
    pub per_stream: Vec<u64>,
}

impl Record {
    pub fn to_fields(&self) -> FieldMap {
        let streams: Vec<[u8; 8]> = self.per_stream.iter().map(|n| n.to_be_bytes()).collect();
        FieldMap::new()
            .with_str(tag::SCENARIO, &self.scenario)
            .with_str(tag::PARAMS, &self.params)
            .with_u64(tag::BYTES, self.bytes)
            .with_u64(tag::SECONDS, self.seconds.to_bits())
            .with_u64(tag::MBPS, self.mbps.to_bits())
            .with_u8(tag::PASS, self.pass as u8)
            .with_u32(tag::REPEATS, self.repeats)
            .with_str(tag::DETAIL, &self.detail)
            .with(tag::PER_STREAM, encode_list(&streams))
    }

    pub fn from_fields(map: &FieldMap) -> Result<Self, WireError> {
        let per_stream = decode_list(map.require(tag::PER_STREAM)?)?
            .into_iter()
            .map(|b| {
                <[u8; 8]>::try_from(b.as_slice())
                    .map(u64::from_be_bytes)
                    .map_err(|_| WireError::MalformedFields("stream count is not 8 bytes"))
            })
            .collect::<Result<_, _>>()?;
        Ok(Record {
            scenario: map.require_str(tag::SCENARIO)?.to_string(),
            params: map.require_str(tag::PARAMS)?.to_string(),
            bytes: map.require_u64(tag::BYTES)?,
            seconds: f64::from_bits(map.require_u64(tag::SECONDS)?),
            mbps: f64::from_bits(map.require_u64(tag::MBPS)?),
            pass: map.require_u8(tag::PASS)? != 0,
            repeats: map.require_u32(tag::REPEATS)?,
            detail: map.require_str(tag::DETAIL)?.to_string(),
            per_stream,
        })
    }

    /// One hex-encoded FieldMap per line.
    pub fn to_line(&self) -> String {
        hex::encode(self.to_fields().encode())
    }

    pub fn from_line(line: &str) -> Result<Self, WireError> {
        let bytes = hex::decode(line.trim()).map_err(|_| WireError::MalformedFields("record line is not hex"))?;
        Record::from_fields(&FieldMap::decode(&bytes)?)
    }
}

pub fn write_records(records: &[Record]) -> String {
    records.iter().map(|r| r.to_line() + "\n").collect()
}

pub fn read_records(text: &str) -> Result<Vec<Record>, WireError> {
    text.lines().filter(|l| !l.trim().is_empty()).map(Record::from_line).collect()
}

/// Human rendering, one row per record.
pub fn render_text(records: &[Record]) -> String {
    let mut out = format!(
        "{:<10} {:<32} {:>12} {:>9} {:>9}  {}\n",
        "scenario", "params", "bytes", "seconds", "Mbps", "result"
    );
    for r in records {
        let _ = writeln!(
            out,
            "{:<10} {:<32} {:>12} {:>9.3} {:>9.1}  {}{}",
            r.scenario,
            r.params,
            r.bytes,
            r.seconds,
            r.mbps,
            if r.pass { "pass" } else { "FAIL" },
            if r.detail.is_empty() { String::new() } else { format!(" ({})", r.detail) }
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_round_trip() {
        let records = vec![
            Record {
                scenario: "transfer".into(),
                params: "source=mem streams=2".into(),
                bytes: 1 << 20,
                seconds: 0.125,
                mbps: 67.108864,
                pass: true,
                repeats: 3,
                detail: String::new(),
                per_stream: vec![1 << 19, 1 << 19],
            },
            Record {
                scenario: "pi".into(),
                params: "nodes=4 digits=1024".into(),
                bytes: 1024,
                seconds: 1.5,
                mbps: 0.0,
                pass: false,
                repeats: 1,
                detail: "digits differ".into(),
                per_stream: vec![],
            },
        ];
        let text = write_records(&records);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(read_records(&text).unwrap(), records);
        assert!(render_text(&records).contains("FAIL (digits differ)"));
    }
}
