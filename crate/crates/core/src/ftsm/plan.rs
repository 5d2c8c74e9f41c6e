use std::time::Duration;

use super::{FtsmError, TransferId};

/// The contiguous part of a region one stream carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub stream_index: u8,
    pub offset: u64,
    pub length: u64,
}

impl Span {
    pub fn end(&self) -> u64 {
        self.offset + self.length
    }
}

/// One chunk of the grid. `ordinal` indexes the transfer bitmap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkRef {
    pub ordinal: u64,
    pub stream_index: u8,
    pub offset: u64,
    pub length: u32,
}

/// Splits `[offset, offset + length)` into spans of ⌈length / streams⌉
/// bytes; the last is shorter and streams left without bytes get no span.
pub fn plan_spans(offset: u64, length: u64, streams: u8) -> Result<Vec<Span>, FtsmError> {
    if length == 0 {
        return Err(FtsmError::EmptyRegion);
    }
    Ok(split(offset, length, streams.max(1)))
}

fn split(offset: u64, length: u64, streams: u8) -> Vec<Span> {
    if length == 0 {
        return Vec::new();
    }
    let size = length.div_ceil(u64::from(streams));
    (0..streams)
        .filter_map(|i| {
            let start = size.checked_mul(u64::from(i))?;
            (start < length).then(|| Span {
                stream_index: i,
                offset: offset + start,
                length: size.min(length - start),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransferPlan {
    pub transfer_id: TransferId,
    pub region_offset: u64,
    pub region_length: u64,
    pub stream_count: u8,
    pub chunk_size: u32,
    spans: Vec<Span>,
    /// First chunk ordinal of each span.
    bases: Vec<u64>,
}

impl TransferPlan {
    /// Builds the chunk grid. A zero-length region yields a plan with no
    /// chunks, which completes immediately.
    pub fn new(transfer_id: TransferId, region_offset: u64, region_length: u64, stream_count: u8, chunk_size: u32) -> Self {
        let stream_count = stream_count.max(1);
        let chunk_size = chunk_size.max(1);
        let spans = split(region_offset, region_length, stream_count);
        let mut bases = Vec::with_capacity(spans.len());
        let mut next = 0u64;
        for span in &spans {
            bases.push(next);
            next += span.length.div_ceil(u64::from(chunk_size));
        }
        TransferPlan {
            transfer_id,
            region_offset,
            region_length,
            stream_count,
            chunk_size,
            spans,
            bases,
        }
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn span(&self, stream_index: u8) -> Option<&Span> {
        self.spans.iter().find(|s| s.stream_index == stream_index)
    }

    pub fn region_end(&self) -> u64 {
        self.region_offset + self.region_length
    }

    pub fn chunk_count(&self) -> u64 {
        match (self.spans.last(), self.bases.last()) {
            (Some(span), Some(base)) => base + span.length.div_ceil(u64::from(self.chunk_size)),
            _ => 0,
        }
    }

    pub fn chunks(&self) -> impl Iterator<Item = ChunkRef> + '_ {
        self.spans
            .iter()
            .enumerate()
            .flat_map(move |(i, _)| self.stream_chunks_at(i))
    }

    pub fn stream_chunks(&self, stream_index: u8) -> impl Iterator<Item = ChunkRef> + '_ {
        let idx = self.spans.iter().position(|s| s.stream_index == stream_index);
        idx.into_iter().flat_map(move |i| self.stream_chunks_at(i))
    }

    fn stream_chunks_at(&self, i: usize) -> impl Iterator<Item = ChunkRef> + '_ {
        let span = self.spans[i];
        let base = self.bases[i];
        let chunk = u64::from(self.chunk_size);
        (0..span.length.div_ceil(chunk)).map(move |k| {
            let offset = span.offset + k * chunk;
            ChunkRef {
                ordinal: base + k,
                stream_index: span.stream_index,
                offset,
                length: chunk.min(span.end() - offset) as u32,
            }
        })
    }

    /// The chunk that starts at `offset` within the given stream's span.
    pub fn chunk_at(&self, stream_index: u8, offset: u64) -> Option<ChunkRef> {
        let i = self.spans.iter().position(|s| s.stream_index == stream_index)?;
        let span = self.spans[i];
        let chunk = u64::from(self.chunk_size);
        if offset < span.offset || offset >= span.end() || !(offset - span.offset).is_multiple_of(chunk) {
            return None;
        }
        let k = (offset - span.offset) / chunk;
        Some(ChunkRef {
            ordinal: self.bases[i] + k,
            stream_index,
            offset,
            length: chunk.min(span.end() - offset) as u32,
        })
    }
}

/// Validates the region against the file and builds the plan. `region` of
/// `None` means the whole file.
pub fn plan_transfer(
    file_size: u64,
    region: Option<(u64, u64)>,
    stream_count: u8,
    chunk_size: u32,
) -> Result<TransferPlan, FtsmError> {
    let (offset, length) = resolve_region(file_size, region)?;
    if length == 0 {
        return Err(FtsmError::EmptyRegion);
    }
    Ok(TransferPlan::new(super::new_transfer_id(), offset, length, stream_count, chunk_size))
}

pub(crate) fn resolve_region(file_size: u64, region: Option<(u64, u64)>) -> Result<(u64, u64), FtsmError> {
    let (offset, length) = region.unwrap_or((0, file_size));
    match offset.checked_add(length) {
        Some(end) if end <= file_size => Ok((offset, length)),
        _ => Err(FtsmError::RegionOutOfBounds {
            offset,
            length,
            file_size,
        }),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThroughputReport {
    pub bytes: u64,
    pub seconds: f64,
    pub mbps: f64,
    pub per_stream: Vec<u64>,
}

/// Megabits per second, decimal: bytes × 8 / (10^6 × seconds).
pub fn mbps(bytes: u64, seconds: f64) -> f64 {
    if bytes == 0 || seconds <= 0.0 {
        0.0
    } else {
        bytes as f64 * 8.0 / (1e6 * seconds)
    }
}

pub fn throughput_report(per_stream: &[u64], wall: Duration) -> ThroughputReport {
    let bytes = per_stream.iter().sum();
    let seconds = wall.as_secs_f64();
    ThroughputReport {
        bytes,
        seconds,
        mbps: mbps(bytes, seconds),
        per_stream: per_stream.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bounds(spans: &[Span]) -> Vec<(u64, u64)> {
        spans.iter().map(|s| (s.offset, s.end())).collect()
    }

    #[test]
    fn ceiling_split_examples() {
        assert_eq!(bounds(&plan_spans(0, 100, 4).unwrap()), [(0, 25), (25, 50), (50, 75), (75, 100)]);
        let lens: Vec<u64> = plan_spans(0, 10, 4).unwrap().iter().map(|s| s.length).collect();
        assert_eq!(lens, [3, 3, 3, 1]);
        assert_eq!(bounds(&plan_spans(7, 9, 1).unwrap()), [(7, 16)]);
        assert!(matches!(plan_spans(0, 0, 2), Err(FtsmError::EmptyRegion)));
    }

    #[test]
    fn short_region_leaves_streams_idle() {
        let spans = plan_spans(0, 5, 4).unwrap();
        assert_eq!(spans.iter().map(|s| s.length).collect::<Vec<_>>(), [2, 2, 1]);
    }

    #[test]
    fn chunk_grid_per_span() {
        let plan = TransferPlan::new([0; 16], 0, 10, 2, 2);
        let chunks: Vec<(u64, u8, u64, u32)> = plan.chunks().map(|c| (c.ordinal, c.stream_index, c.offset, c.length)).collect();
        assert_eq!(chunks, [(0, 0, 0, 2), (1, 0, 2, 2), (2, 0, 4, 1), (3, 1, 5, 2), (4, 1, 7, 2), (5, 1, 9, 1)]);
        assert_eq!(plan.chunk_count(), 6);
        assert_eq!(plan.chunk_at(1, 7).unwrap().ordinal, 4);
        assert_eq!(plan.chunk_at(1, 6), None);
        assert_eq!(plan.chunk_at(0, 5), None);
    }

    #[test]
    fn out_of_bounds_region() {
        assert!(matches!(plan_transfer(16, Some((10, 7)), 1, 4096), Err(FtsmError::RegionOutOfBounds { .. })));
        assert!(matches!(plan_transfer(16, Some((u64::MAX, 2)), 1, 4096), Err(FtsmError::RegionOutOfBounds { .. })));
        assert_eq!(plan_transfer(16, Some((10, 5)), 1, 4096).unwrap().region_end(), 15);
    }

    #[test]
    fn report_formula() {
        let r = throughput_report(&[500_000_000, 500_000_000], Duration::from_secs_f64(12.84));
        assert!((r.mbps - 623.052).abs() < 0.01, "{}", r.mbps);
        assert_eq!(r.bytes, 1_000_000_000);
        assert_eq!(throughput_report(&[], Duration::from_secs(1)).mbps, 0.0);
        assert_eq!(mbps(1, 0.0), 0.0);
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn spans_partition_region(offset in 0u64..1 << 40, length in 1u64..1 << 30, streams in 1u8..=64) {
            let spans = plan_spans(offset, length, streams).unwrap();
            prop_assert_eq!(spans[0].offset, offset);
            for pair in spans.windows(2) {
                prop_assert_eq!(pair[0].end(), pair[1].offset);
            }
            prop_assert_eq!(spans.last().unwrap().end(), offset + length);
            prop_assert!(spans.len() <= streams as usize);
        }

        #[test]
        fn chunks_tile_region(length in 0u64..50_000, streams in 1u8..9, chunk in 1u32..5000) {
            let plan = TransferPlan::new([1; 16], 3, length, streams, chunk);
            let mut next = 3;
            for (i, c) in plan.chunks().enumerate() {
                prop_assert_eq!(c.ordinal, i as u64);
                prop_assert_eq!(c.offset, next);
                prop_assert!(c.length >= 1 && c.length <= chunk);
                prop_assert_eq!(plan.chunk_at(c.stream_index, c.offset), Some(c));
                next += u64::from(c.length);
            }
            prop_assert_eq!(next, 3 + length);
            prop_assert_eq!(plan.chunks().count() as u64, plan.chunk_count());
        }
    }
}
