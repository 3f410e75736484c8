//! Clip features: on-disk format, fixed-interval sampling and projection.

use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::error::{Result, TanError};
use crate::numeric::{LinearVars, Tape, Tensor, Var};

pub const FEATURE_MAGIC: &[u8; 8] = b"TAN2DFTR";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 4 + 8;

/// Per-clip features of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFeatureSequence {
    pub video_id: String,
    /// `[n_clips × d_in]`
    pub features: Tensor,
    /// Seconds per clip.
    pub tau: f64,
}

impl ClipFeatureSequence {
    pub fn new(video_id: impl Into<String>, features: Tensor, tau: f64) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() == 0 {
            return Err(TanError::Data(format!(
                "clip sequence needs at least one clip, got shape {:?}",
                features.shape()
            )));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(TanError::Data(format!("clip duration must be positive, got {tau}")));
        }
        if !features.all_finite() {
            return Err(TanError::Data("clip features contain non-finite values".into()));
        }
        Ok(ClipFeatureSequence {
            video_id: video_id.into(),
            features,
            tau,
        })
    }

    pub fn n_clips(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn duration(&self) -> f64 {
        self.n_clips() as f64 * self.tau
    }
}

/// Exactly `N` clips drawn from a longer (or shorter) sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledClips {
    /// `[N × d_in]`
    pub features: Tensor,
    /// Seconds per sampled clip.
    pub tau: f64,
    /// Source clips aggregated into each output row.
    pub sources: Vec<Range<usize>>,
}

impl SampledClips {
    pub fn n(&self) -> usize {
        self.sources.len()
    }
}

/// Fixed-interval sampling down (or up) to `n` clips.
///
/// Output row `i` covers source clips `⌊i·len/n⌋ .. ⌊(i+1)·len/n⌋` and takes their
/// channel-wise maximum. When the source is shorter than `n`, each output row
/// repeats the source clip nearest its centre.
pub fn sample_clips(seq: &ClipFeatureSequence, n: usize) -> Result<SampledClips> {
    if n == 0 {
        return Err(TanError::Config("sample count must be at least 1".into()));
    }
    let len = seq.n_clips();
    if len == 0 {
        return Err(TanError::Data(format!("video {} has no clips", seq.video_id)));
    }
    let d = seq.dim();
    let mut data = Vec::with_capacity(n * d);
    let mut sources = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i * len / n;
        let hi = (i + 1) * len / n;
        let range = if hi > lo {
            lo..hi
        } else {
            let nearest = (((2 * i + 1) * len) / (2 * n)).min(len - 1);
            nearest..nearest + 1
        };
        let mut row = seq.features.row(range.start).to_vec();
        for r in range.start + 1..range.end {
            for (acc, &v) in row.iter_mut().zip(seq.features.row(r)) {
                *acc = acc.max(v);
            }
        }
        data.extend_from_slice(&row);
        sources.push(range);
    }
    Ok(SampledClips {
        features: Tensor::new(vec![n, d], data)?,
        tau: seq.duration() / n as f64,
        sources,
    })
}

/// Per-clip affine projection `[N × d_in] → [N × d_v]`.
pub fn project_clip_features(tape: &mut Tape, clips: Var, proj: &LinearVars) -> Result<Var> {
    let d_in = tape.shape(clips).last().copied().unwrap_or(0);
    let w_in = tape.shape(proj.weight)[0];
    if d_in != w_in {
        return Err(TanError::Config(format!(
            "clip projection expects {w_in} input channels, features have {d_in}"
        )));
    }
    proj.apply(tape, clips)
}

pub fn encode_feature_file(seq: &ClipFeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + seq.features.numel() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.n_clips() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    out.extend_from_slice(&seq.tau.to_le_bytes());
    for &v in seq.features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Values are stored as 32-bit floats; writing is exact only for inputs
/// already representable in `f32`.
pub fn write_feature_file(path: &Path, seq: &ClipFeatureSequence) -> Result<()> {
    fs::write(path, encode_feature_file(seq)).map_err(|e| TanError::io(path, e))
}

/// Header fields of a feature file: `(n_clips, d_in, tau)`.
pub fn read_feature_header(path: &Path) -> Result<(usize, usize, f64)> {
    let bytes = fs::read(path).map_err(|e| TanError::io(path, e))?;
    parse_header(&bytes, path)
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<(usize, usize, f64)> {
    if bytes.len() < HEADER_LEN {
        return Err(TanError::format(path, "truncated header"));
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(TanError::format(path, "bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(8);
    if version != FEATURE_VERSION {
        return Err(TanError::format(path, format!("unsupported version {version}")));
    }
    let n_clips = u32_at(12) as usize;
    let d_in = u32_at(16) as usize;
    let tau = f64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes"));
    Ok((n_clips, d_in, tau))
}

pub fn decode_feature_file(bytes: &[u8], path: &Path) -> Result<ClipFeatureSequence> {
    let (n_clips, d_in, tau) = parse_header(bytes, path)?;
    if n_clips == 0 {
        return Err(TanError::Data(format!("{}: header declares zero clips", path.display())));
    }
    let expected = HEADER_LEN + n_clips * d_in * 4;
    if bytes.len() != expected {
        return Err(TanError::format(
            path,
            format!("expected {expected} bytes for {n_clips}x{d_in}, found {}", bytes.len()),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let video_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ClipFeatureSequence::new(video_id, Tensor::new(vec![n_clips, d_in], data)?, tau)
}

pub fn read_feature_file(path: &Path) -> Result<ClipFeatureSequence> {
    let bytes = fs::read(path).map_err(|e| TanError::io(path, e))?;
    decode_feature_file(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Linear;
    use proptest::prelude::*;

    fn seq_from(values: Vec<f64>, d: usize, tau: f64) -> ClipFeatureSequence {
        let n = values.len() / d;
        ClipFeatureSequence::new("v", Tensor::new(vec![n, d], values).unwrap(), tau).unwrap()
    }

    #[test]
    fn same_length_is_identity() {
        let s = seq_from((0..12).map(|v| v as f64).collect(), 2, 0.5);
        let out = sample_clips(&s, 6).unwrap();
        assert_eq!(out.features, s.features);
        assert_eq!(out.sources, (0..6).map(|i| i..i + 1).collect::<Vec<_>>());
    }

    #[test]
    fn double_length_constant_stays_constant() {
        let s = seq_from(vec![2.5; 16], 2, 1.0);
        let out = sample_clips(&s, 4).unwrap();
        assert!(out.features.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn stride_two_takes_pair_maxima() {
        let s = seq_from((0..8).map(|v| v as f64).collect(), 1, 1.0);
        let out = sample_clips(&s, 4).unwrap();
        assert_eq!(out.features.data(), &[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(out.tau, 2.0);
    }

    #[test]
    fn short_sequences_repeat_nearest_clip() {
        let s = seq_from(vec![10.0, 20.0], 1, 1.0);
        let out = sample_clips(&s, 4).unwrap();
        assert_eq!(out.features.data(), &[10.0, 10.0, 20.0, 20.0]);
        assert_eq!(out.tau, 0.5);
    }

    #[test]
    fn zero_samples_rejected() {
        let s = seq_from(vec![1.0], 1, 1.0);
        assert!(sample_clips(&s, 0).is_err());
    }

    #[test]
    fn empty_sequence_rejected() {
        let err = ClipFeatureSequence::new("v", Tensor::zeros(vec![0, 3]), 1.0).unwrap_err();
        assert!(matches!(err, TanError::Data(_)));
    }

    #[test]
    fn projection_identity_and_zero() {
        let clips = Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]);
        let mut ident = Linear::zeros(2, 2);
        ident.weight.data_mut()[0] = 1.0;
        ident.weight.data_mut()[3] = 1.0;
        let mut tape = Tape::new();
        let x = tape.leaf(&clips);
        let p = ident.bind(&mut tape);
        let y = project_clip_features(&mut tape, x, &p).unwrap();
        assert_eq!(tape.value(y), clips.data());

        let z = Linear::zeros(2, 3).bind(&mut tape);
        let y = project_clip_features(&mut tape, x, &z).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));

        let wrong = Linear::zeros(3, 3).bind(&mut tape);
        assert!(matches!(
            project_clip_features(&mut tape, x, &wrong),
            Err(TanError::Config(_))
        ));
    }

    #[test]
    fn projection_gradients() {
        use crate::numeric::grad_check_many;
        let x = Tensor::from_rows(&[&[0.3, -1.2, 0.7], &[1.1, 0.4, -0.5]]);
        let w = Tensor::from_rows(&[&[0.2, -0.4], &[0.9, 0.1], &[-0.3, 0.6]]);
        let b = Tensor::new(vec![2], vec![0.05, -0.1]).unwrap();
        let err = grad_check_many(
            |t, v| {
                let p = LinearVars { weight: v[1], bias: v[2] };
                let y = project_clip_features(t, v[0], &p)?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn truncated_file_is_format_error() {
        let s = seq_from(vec![1.0, 2.0, 3.0, 4.0], 2, 0.25);
        let bytes = encode_feature_file(&s);
        let p = Path::new("x.bin");
        assert!(matches!(
            decode_feature_file(&bytes[..bytes.len() - 1], p),
            Err(TanError::Format { .. })
        ));
        assert!(matches!(decode_feature_file(&bytes[..10], p), Err(TanError::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_feature_file(&bad, p), Err(TanError::Format { .. })));
    }

    #[test]
    fn zero_clip_header_is_data_error() {
        let s = seq_from(vec![1.0, 2.0], 2, 0.25);
        let mut bytes = encode_feature_file(&s);
        bytes[12..16].copy_from_slice(&0u32.to_le_bytes());
        bytes.truncate(HEADER_LEN);
        assert!(matches!(
            decode_feature_file(&bytes, Path::new("x.bin")),
            Err(TanError::Data(_))
        ));
    }

    proptest! {
        #[test]
        fn file_round_trip(values in proptest::collection::vec(-1e3f32..1e3, 1..60), tau in 0.01f64..10.0) {
            let d = 3;
            let n = values.len().div_ceil(d);
            let mut data: Vec<f64> = values.iter().map(|&v| v as f64).collect();
            data.resize(n * d, 0.0);
            let s = seq_from(data, d, tau);
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("v.bin");
            write_feature_file(&p, &s).unwrap();
            let back = read_feature_file(&p).unwrap();
            prop_assert_eq!(back.features, s.features);
            prop_assert_eq!(back.tau.to_bits(), tau.to_bits());
        }

        #[test]
        fn sampling_always_yields_n_rows_and_preserves_time(len in 1usize..70, n in 1usize..40, tau in 0.1f64..3.0) {
            let s = seq_from((0..len).map(|v| v as f64).collect(), 1, tau);
            let out = sample_clips(&s, n).unwrap();
            prop_assert_eq!(out.features.rows(), n);
            prop_assert!((out.tau * n as f64 - len as f64 * tau).abs() < 1e-9);
        }
    }
}
