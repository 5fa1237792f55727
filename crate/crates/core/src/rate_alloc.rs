//! Entropy-driven symbol allocation: per-vector lengths, truncation masks,
//! frame assembly and channel bandwidth accounting.
//!
//! A stream is a `[N, C]` latent: `N` embedding vectors of `C` reals. A
//! vector with length `k_j` sends its first `k_j` (mapped) entries, padded
//! with one zero when `k_j` is odd, as `ceil(k_j / 2)` complex symbols.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::channel::SymbolVector;
use crate::error::{Error, Result};

/// Number of latent streams in a frame: image-specific, event-specific, shared.
pub const STREAMS: usize = 3;

/// `k_j = min(cap, ceil(eta * r_j))` for each per-vector rate `r_j` in bits.
///
/// Products within `1e-9` relative of an integer are treated as that
/// integer, so `0.25 * 12` stays `3` despite float error.
pub fn compute_lengths(rates: &[f64], eta: f64, cap: usize) -> Result<Vec<usize>> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::BadConfig(format!("length scale eta={eta}")));
    }
    rates
        .iter()
        .map(|&r| {
            if !(r >= 0.0) {
                return Err(Error::DomainError(format!("negative or NaN rate {r}")));
            }
            let x = eta * r;
            if !x.is_finite() {
                return Ok(cap);
            }
            let k = (x - 1e-9 * x.max(1.0)).ceil().max(0.0);
            Ok((k as usize).min(cap))
        })
        .collect()
}

/// Real-entry lengths for every vector of every stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LengthPlan {
    lengths: [Vec<usize>; STREAMS],
    dims: [usize; STREAMS],
}

impl LengthPlan {
    /// `lengths[i][j] <= dims[i]` is required.
    pub fn new(lengths: [Vec<usize>; STREAMS], dims: [usize; STREAMS]) -> Result<Self> {
        for i in 0..STREAMS {
            if let Some(&k) = lengths[i].iter().find(|&&k| k > dims[i]) {
                return Err(Error::PlanMismatch(format!(
                    "stream {i}: length {k} exceeds vector dimension {}",
                    dims[i]
                )));
            }
            if lengths[i].iter().any(|&k| k > u16::MAX as usize) {
                return Err(Error::PlanMismatch("length does not fit in u16".into()));
            }
        }
        Ok(Self { lengths, dims })
    }

    pub fn lengths(&self, stream: usize) -> &[usize] {
        &self.lengths[stream]
    }

    pub fn dim(&self, stream: usize) -> usize {
        self.dims[stream]
    }

    pub fn vector_counts(&self) -> [usize; STREAMS] {
        [0, 1, 2].map(|i| self.lengths[i].len())
    }

    /// Complex channel uses of stream `i`: `sum_j ceil(k_j / 2)`.
    pub fn uses(&self, stream: usize) -> usize {
        self.lengths[stream].iter().map(|k| k.div_ceil(2)).sum()
    }

    pub fn totals(&self) -> [usize; STREAMS] {
        [0, 1, 2].map(|i| self.uses(i))
    }

    pub fn total_uses(&self) -> usize {
        self.totals().iter().sum()
    }

    /// Bytes of side information in the frame header (not charged to CBR).
    pub fn side_info_bytes(&self) -> usize {
        4 + 4 * STREAMS + 4 + 2 * self.lengths.iter().map(Vec::len).sum::<usize>()
    }
}

/// Channel bandwidth ratios: complex uses per source pixel value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cbr {
    pub rho: f64,
    pub rho0: f64,
    pub rho1: f64,
    pub rho2: f64,
}

pub fn cbr_from_uses(k: [usize; STREAMS], n0: usize) -> Result<Cbr> {
    if n0 == 0 {
        return Err(Error::BadConfig("CBR needs n0 > 0".into()));
    }
    let r = k.map(|k| k as f64 / n0 as f64);
    Ok(Cbr {
        // From the integer total, so `rho` is exactly the frame's uses over n0.
        rho: (k[0] + k[1] + k[2]) as f64 / n0 as f64,
        rho0: r[0],
        rho1: r[1],
        rho2: r[2],
    })
}

pub fn cbr(plan: &LengthPlan, n0: usize) -> Result<Cbr> {
    cbr_from_uses(plan.totals(), n0)
}

/// Learned `C -> C` maps applied before truncation and after zero-filling.
/// Both start as the identity.
#[derive(Clone, Copy, Debug)]
pub struct MaskMaps {
    dim: usize,
    enc_w: ParamId,
    enc_b: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
}

impl MaskMaps {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            dim,
            enc_w: store.insert(format!("{prefix}.enc.w"), Tensor::eye(dim))?,
            enc_b: store.insert(format!("{prefix}.enc.b"), Tensor::zeros(&[dim]))?,
            dec_w: store.insert(format!("{prefix}.dec.w"), Tensor::eye(dim))?,
            dec_b: store.insert(format!("{prefix}.dec.b"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, y: Var) -> Result<Var> {
        let w = tape.param(store, self.enc_w);
        let b = tape.param(store, self.enc_b);
        tape.affine(y, w, b)
    }

    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, y: Var) -> Result<Var> {
        let w = tape.param(store, self.dec_w);
        let b = tape.param(store, self.dec_b);
        tape.affine(y, w, b)
    }

    /// Fits both maps to the principal axes of `rows` (`[N, C]`): the encoder
    /// centres and rotates so that output entries come in order of decreasing
    /// variance, and the decoder is its exact inverse. Truncating the encoded
    /// vector then drops the least energetic directions first.
    pub fn fit_principal(&self, store: &mut ParamStore, rows: &Tensor) -> Result<()> {
        let (n, c) = rows.dims2()?;
        if c != self.dim {
            return Err(Error::shape(format!(
                "mask maps are {}-d, rows are {c}-d",
                self.dim
            )));
        }
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let x = DMatrix::from_row_slice(n, c, rows.data());
        let mean = x.row_mean();
        let centred = DMatrix::from_fn(n, c, |i, j| x[(i, j)] - mean[j]);
        let cov = centred.transpose() * &centred / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });
        // v[(i, k)]: component i of the k-th axis, sign fixed so its largest entry is positive.
        let v = DMatrix::from_fn(c, c, |i, k| {
            let col = eig.eigenvectors.column(order[k]);
            let pivot = col.iamax();
            col[i] * col[pivot].signum()
        });
        let enc_b = -(&mean * &v);
        store
            .get_mut(self.enc_w)
            .data_mut()
            .copy_from_slice(&row_major(&v));
        store
            .get_mut(self.enc_b)
            .data_mut()
            .copy_from_slice(enc_b.as_slice());
        store
            .get_mut(self.dec_w)
            .data_mut()
            .copy_from_slice(&row_major(&v.transpose()));
        store
            .get_mut(self.dec_b)
            .data_mut()
            .copy_from_slice(mean.as_slice());
        Ok(())
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// 0/1 tensor selecting the first `k_j` entries of each row of a `[N, C]` latent.
pub fn truncation_mask(lengths: &[usize], dim: usize) -> Tensor {
    Tensor::from_fn(&[lengths.len(), dim], |i| {
        if i % dim < lengths[i / dim] {
            1.0
        } else {
            0.0
        }
    })
}

fn check_rows(y: &Tensor, lengths: &[usize]) -> Result<usize> {
    let (n, c) = y.dims2()?;
    if n != lengths.len() {
        return Err(Error::PlanMismatch(format!(
            "{n} vectors but {} planned lengths",
            lengths.len()
        )));
    }
    if let Some(&k) = lengths.iter().find(|&&k| k > c) {
        return Err(Error::PlanMismatch(format!("length {k} > dimension {c}")));
    }
    Ok(c)
}

/// Keeps the first `k_j` entries of every row, each segment zero-padded to
/// even length, concatenated in row order.
pub fn truncate_vectors(y: &Tensor, lengths: &[usize]) -> Result<Vec<f64>> {
    let c = check_rows(y, lengths)?;
    let mut out = Vec::new();
    for (row, &k) in y.data().chunks_exact(c.max(1)).zip(lengths) {
        out.extend_from_slice(&row[..k]);
        if k % 2 == 1 {
            out.push(0.0);
        }
    }
    Ok(out)
}

/// Inverse of [`truncate_vectors`] with zeros at untransmitted positions.
pub fn restore_vectors(payload: &[f64], lengths: &[usize], dim: usize) -> Result<Tensor> {
    let expected: usize = lengths.iter().map(|k| 2 * k.div_ceil(2)).sum();
    if payload.len() != expected {
        return Err(Error::PlanMismatch(format!(
            "{} payload reals, plan needs {expected}",
            payload.len()
        )));
    }
    if let Some(&k) = lengths.iter().find(|&&k| k > dim) {
        return Err(Error::PlanMismatch(format!("length {k} > dimension {dim}")));
    }
    let mut data = vec![0.0; lengths.len() * dim];
    let mut pos = 0;
    for (j, &k) in lengths.iter().enumerate() {
        data[j * dim..j * dim + k].copy_from_slice(&payload[pos..pos + k]);
        pos += 2 * k.div_ceil(2);
    }
    Tensor::new(vec![lengths.len(), dim], data)
}

/// Segments of one stream after the encoder map and truncation.
pub fn mask_encode(
    maps: &MaskMaps,
    store: &ParamStore,
    y: &Tensor,
    lengths: &[usize],
) -> Result<Vec<f64>> {
    check_rows(y, lengths)?;
    let mut tape = Tape::new();
    let v = tape.constant(y.clone());
    let m = maps.encode(&mut tape, store, v)?;
    truncate_vectors(tape.value(m), lengths)
}

/// Fixed-length latents from received segments: zero-fill, then the decoder map.
pub fn mask_decode(
    maps: &MaskMaps,
    store: &ParamStore,
    payload: &[f64],
    lengths: &[usize],
) -> Result<Tensor> {
    let filled = restore_vectors(payload, lengths, maps.dim())?;
    let mut tape = Tape::new();
    let v = tape.constant(filled);
    let d = maps.decode(&mut tape, store, v)?;
    Ok(tape.value(d).clone())
}

/// A transmitted frame: payload symbols plus error-free side information.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolFrame {
    pub plan: LengthPlan,
    pub power_scale: f64,
    pub payload: SymbolVector,
}

impl SymbolFrame {
    /// Concatenates per-stream segment payloads (`[s0, s1, s2]`).
    pub fn assemble(plan: LengthPlan, streams: [Vec<f64>; STREAMS]) -> Result<Self> {
        for (i, s) in streams.iter().enumerate() {
            if s.len() != 2 * plan.uses(i) {
                return Err(Error::PlanMismatch(format!(
                    "stream {i}: {} reals for {} complex uses",
                    s.len(),
                    plan.uses(i)
                )));
            }
        }
        let payload = SymbolVector::from_interleaved(streams.concat())?;
        Ok(Self {
            plan,
            power_scale: 1.0,
            payload,
        })
    }

    /// Splits the payload back into per-stream reals.
    pub fn split(&self) -> Result<[Vec<f64>; STREAMS]> {
        let v = self.payload.interleaved();
        if v.len() != 2 * self.plan.total_uses() {
            return Err(Error::PlanMismatch(format!(
                "payload of {} uses, plan totals {}",
                v.len() / 2,
                self.plan.total_uses()
            )));
        }
        let mut pos = 0;
        let mut out: [Vec<f64>; STREAMS] = Default::default();
        for (i, slot) in out.iter_mut().enumerate() {
            let n = 2 * self.plan.uses(i);
            *slot = v[pos..pos + n].to_vec();
            pos += n;
        }
        Ok(out)
    }

    pub fn complex_uses(&self) -> usize {
        self.payload.len()
    }
}

const JEIF_MAGIC: &[u8; 4] = b"JEIF";

/// `JEIF` wire format: magic, `u32` k0/k1/k2, `f32` power scale, `u16`
/// lengths for every vector in stream order, then `f32` payload pairs.
pub fn serialize_frame(frame: &SymbolFrame) -> Vec<u8> {
    let plan = &frame.plan;
    let mut out = Vec::with_capacity(plan.side_info_bytes() + 8 * frame.complex_uses());
    out.extend_from_slice(JEIF_MAGIC);
    for k in plan.totals() {
        out.extend_from_slice(&(k as u32).to_le_bytes());
    }
    out.extend_from_slice(&(frame.power_scale as f32).to_le_bytes());
    for i in 0..STREAMS {
        for &k in plan.lengths(i) {
            out.extend_from_slice(&(k as u16).to_le_bytes());
        }
    }
    for &v in frame.payload.interleaved() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parses a `JEIF` frame. Vector counts and dimensions per stream are
/// known to the receiver from the model configuration.
pub fn parse_frame(
    bytes: &[u8],
    counts: [usize; STREAMS],
    dims: [usize; STREAMS],
) -> Result<SymbolFrame> {
    let n_lengths: usize = counts.iter().sum();
    let header = 4 + 4 * STREAMS + 4;
    if bytes.len() < header + 2 * n_lengths || &bytes[..4] != JEIF_MAGIC {
        return Err(Error::format("JEIF frame", "truncated or missing header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let totals = [u32_at(4), u32_at(8), u32_at(12)];
    let scale = f32::from_le_bytes(bytes[16..20].try_into().unwrap()) as f64;
    let mut pos = header;
    let mut lengths: [Vec<usize>; STREAMS] = Default::default();
    for (i, l) in lengths.iter_mut().enumerate() {
        *l = (0..counts[i])
            .map(|j| {
                let o = pos + 2 * j;
                u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize
            })
            .collect();
        pos += 2 * counts[i];
    }
    let plan = LengthPlan::new(lengths, dims)?;
    if plan.totals() != totals {
        return Err(Error::PlanMismatch(format!(
            "header totals {totals:?}, lengths imply {:?}",
            plan.totals()
        )));
    }
    let body = &bytes[pos..];
    if body.len() != 8 * plan.total_uses() {
        return Err(Error::format(
            "JEIF frame",
            format!(
                "{} payload bytes for {} complex uses",
                body.len(),
                plan.total_uses()
            ),
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(SymbolFrame {
        plan,
        power_scale: scale,
        payload: SymbolVector::from_interleaved(values)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_rule_examples() {
        assert_eq!(compute_lengths(&[0.0], 0.24, 16).unwrap(), vec![0]);
        assert_eq!(compute_lengths(&[10.0], 0.24, 16).unwrap(), vec![3]);
        assert_eq!(
            compute_lengths(&[1e12, f64::INFINITY], 0.24, 16).unwrap(),
            vec![16, 16]
        );
        assert_eq!(
            compute_lengths(&[12.0, 25.0], 0.25, 16).unwrap(),
            vec![3, 7]
        );
        assert!(compute_lengths(&[-1.0], 0.24, 16).is_err());
    }

    #[test]
    fn cbr_operating_point() {
        let c = cbr_from_uses([4096, 8192, 4620], 256 * 256 * 3).unwrap();
        assert!((c.rho - 0.0860).abs() < 1e-4);
        assert_eq!(cbr_from_uses([0; 3], 10).unwrap().rho, 0.0);
        assert!(cbr_from_uses([1, 1, 1], 0).is_err());
    }

    #[test]
    fn odd_lengths_pad_one_zero() {
        let y = Tensor::from_fn(&[2, 4], |i| i as f64 + 1.0);
        let seg = truncate_vectors(&y, &[3, 0]).unwrap();
        assert_eq!(seg, vec![1.0, 2.0, 3.0, 0.0]);
        let back = restore_vectors(&seg, &[3, 0], 4).unwrap();
        assert_eq!(back.data(), &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let full = truncate_vectors(&y, &[4, 4]).unwrap();
        assert_eq!(full, y.data());
    }

    #[test]
    fn plan_errors() {
        assert!(LengthPlan::new([vec![5], vec![], vec![]], [4, 4, 4]).is_err());
        let y = Tensor::zeros(&[2, 4]);
        assert!(matches!(
            truncate_vectors(&y, &[1]),
            Err(Error::PlanMismatch(_))
        ));
        assert!(matches!(
            restore_vectors(&[0.0; 3], &[3], 4),
            Err(Error::PlanMismatch(_))
        ));
    }

    #[test]
    fn identity_maps_give_projection() {
        let mut store = ParamStore::new();
        let maps = MaskMaps::new(&mut store, "m", 4).unwrap();
        let y = Tensor::from_fn(&[3, 4], |i| (i as f64) - 4.5);
        let ks = [2, 4, 1];
        let once = mask_decode(
            &maps,
            &store,
            &mask_encode(&maps, &store, &y, &ks).unwrap(),
            &ks,
        )
        .unwrap();
        let twice = mask_decode(
            &maps,
            &store,
            &mask_encode(&maps, &store, &once, &ks).unwrap(),
            &ks,
        )
        .unwrap();
        assert_eq!(once, twice);
        let masked: Vec<f64> = y
            .data()
            .iter()
            .zip(truncation_mask(&ks, 4).data())
            .map(|(a, m)| a * m)
            .collect();
        assert_eq!(once.data(), &masked[..]);
    }

    #[test]
    fn principal_fit_orders_variance_and_inverts() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        // Most variance along (1, 1, 0), some along (0, 0, 1), little elsewhere.
        let mut data = vec![0.0; 1200];
        for row in data.chunks_exact_mut(3) {
            let (a, b, c): (f64, f64, f64) = (
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.1..0.1),
            );
            row.copy_from_slice(&[a + c + 2.0, a - c, b - 1.0]);
        }
        let y = Tensor::new(vec![400, 3], data).unwrap();
        let mut store = ParamStore::new();
        let maps = MaskMaps::new(&mut store, "m", 3).unwrap();
        maps.fit_principal(&mut store, &y).unwrap();
        let full = [3; 400];
        let back = mask_decode(
            &maps,
            &store,
            &mask_encode(&maps, &store, &y, &full).unwrap(),
            &full,
        )
        .unwrap();
        for (a, b) in back.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let mut tape = Tape::new();
        let v = tape.constant(y.clone());
        let e = maps.encode(&mut tape, &store, v).unwrap();
        let enc = tape.value(e).data();
        let var: Vec<f64> = (0..3)
            .map(|k| enc.iter().skip(k).step_by(3).map(|x| x * x).sum::<f64>() / 400.0)
            .collect();
        assert!(var[0] > var[1] && var[1] > var[2], "{var:?}");
        let mean0: f64 = enc.iter().step_by(3).sum::<f64>() / 400.0;
        assert!(mean0.abs() < 1e-9);
        // One kept entry reconstructs better than keeping the first raw coordinate.
        let ks = [1; 400];
        let one = mask_decode(
            &maps,
            &store,
            &mask_encode(&maps, &store, &y, &ks).unwrap(),
            &ks,
        )
        .unwrap();
        let err: f64 = one
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(err < 400.0 * 0.5, "{err}");
        assert!(maps
            .fit_principal(&mut store, &Tensor::zeros(&[4, 2]))
            .is_err());
    }

    #[test]
    fn frame_wire_round_trip() {
        let plan = LengthPlan::new([vec![3, 0], vec![2], vec![1, 4, 0]], [4, 2, 4]).unwrap();
        assert_eq!(plan.totals(), [2, 1, 3]);
        let streams = [
            vec![1.0, 2.0, 3.0, 0.0],
            vec![-1.0, 0.5],
            vec![7.0, 0.0, 1.0, 2.0, 3.0, 4.0],
        ];
        let mut frame = SymbolFrame::assemble(plan.clone(), streams.clone()).unwrap();
        frame.power_scale = 2.5;
        assert_eq!(frame.complex_uses(), 6);
        let bytes = serialize_frame(&frame);
        assert_eq!(bytes.len(), plan.side_info_bytes() + 6 * 8);
        let back = parse_frame(&bytes, plan.vector_counts(), [4, 2, 4]).unwrap();
        assert_eq!(back, frame);
        assert_eq!(back.split().unwrap(), streams);
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            parse_frame(&bad, plan.vector_counts(), [4, 2, 4]),
            Err(Error::PlanMismatch(_))
        ));
    }
}
