use ndarray::{s, Array2};

use super::FeatureSequence;
use crate::error::{Error, Result};

/// A fixed-length window of a [`FeatureSequence`].
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// `[L x D]`.
    pub data: Array2<f64>,
    pub parent_seq: String,
    pub frame_offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Windows of `seg_len` frames at offsets `0, hop, 2*hop, ...` while they fit.
pub fn segment_sequence(f: &FeatureSequence, seg_len: usize, hop: usize) -> Result<Vec<Segment>> {
    if hop == 0 {
        return Err(Error::InvalidArgument("segment hop must be >= 1".into()));
    }
    if seg_len == 0 {
        return Err(Error::InvalidArgument("segment length must be >= 1".into()));
    }
    let t = f.num_frames();
    if seg_len > t {
        return Err(Error::SequenceTooShort { frames: t, seg_len });
    }
    Ok((0..=t - seg_len)
        .step_by(hop)
        .map(|off| Segment {
            data: f.frames.slice(s![off..off + seg_len, ..]).to_owned(),
            parent_seq: f.seq_id.clone(),
            frame_offset: off,
        })
        .collect())
}
