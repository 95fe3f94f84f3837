//! Modality encoders: the 2D temporal proposal map over clip features, the
//! stacked bidirectional gated recurrent query encoder, and the two-layer
//! concept graph convolution.

use crate::concepts::{ConceptVocabulary, EmbeddingTable};
use crate::config::Pooling;
use crate::error::{CcaError, Result};
use crate::numerics::{matmul, Tape, Tensor, Var};
use crate::params::{BiGruParams, GcnParams, GruCellParams};

/// Pre-extracted clip features of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFeatures {
    pub video_id: String,
    pub duration_s: f64,
    /// `[T_c × d_v]`
    pub features: Tensor,
}

/// Candidate spans of one video with pooled features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    /// Inclusive clip index pairs, row-major over the upper triangle.
    pub spans_clip: Vec<(usize, usize)>,
    pub spans_s: Vec<(f64, f64)>,
    /// `[N × d_v]`
    pub features: Tensor,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.spans_clip.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans_clip.is_empty()
    }
}

/// Resamples `[T × d]` features to `n` rows. Output row `i` is the mean of
/// input rows `floor(i·T/n) .. max(floor((i+1)·T/n), floor(i·T/n) + 1)`.
pub fn resample(features: &Tensor, n: usize) -> Result<Tensor> {
    let (t, d) = features.shape2();
    if features.rank() != 2 || t == 0 || n == 0 {
        return Err(CcaError::contract(format!(
            "resampling needs a non-empty [T × d] sequence and n ≥ 1, got {:?} → {n}",
            features.dims()
        )));
    }
    if t == n {
        return Ok(features.clone());
    }
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let lo = i * t / n;
        let hi = ((i + 1) * t / n).max(lo + 1);
        let row = out.row_mut(i);
        for r in lo..hi {
            for (o, v) in row.iter_mut().zip(features.row(r)) {
                *o += v;
            }
        }
        let k = (hi - lo) as f64;
        row.iter_mut().for_each(|o| *o /= k);
    }
    Ok(out)
}

/// Valid cells of the `n_c × n_c` map in row-major order.
///
/// Sparse mode keeps every span of at most `max(n_c/8, 1)` clips; a longer
/// span of `len` clips is kept when its start and length are both multiples
/// of the stride `2^ceil(log2(len / base))`.
pub fn enumerate_spans(n_c: usize, sparse: bool) -> Vec<(usize, usize)> {
    let base = (n_c / 8).max(1);
    let mut spans = Vec::with_capacity(n_c * (n_c + 1) / 2);
    for a in 0..n_c {
        for b in a..n_c {
            let len = b - a + 1;
            if !sparse || len <= base {
                spans.push((a, b));
                continue;
            }
            let stride = len.div_ceil(base).next_power_of_two();
            if a % stride == 0 && len % stride == 0 {
                spans.push((a, b));
            }
        }
    }
    spans
}

/// Clip span `(a, b)` in seconds: `[a·D/n_c, (b+1)·D/n_c]`.
pub fn span_seconds(span: (usize, usize), n_c: usize, duration_s: f64) -> (f64, f64) {
    let unit = duration_s / n_c as f64;
    (span.0 as f64 * unit, (span.1 + 1) as f64 * unit)
}

/// Builds the proposal map over `n_c` resampled clips, pooling each span's
/// clip features element-wise.
pub fn build_proposal_map(clips: &ClipFeatures, n_c: usize, pooling: Pooling, sparse: bool) -> Result<ProposalSet> {
    if clips.features.is_empty() || clips.features.rank() != 2 {
        return Err(CcaError::contract(format!("video {:?} has no clip features", clips.video_id)));
    }
    let f = resample(&clips.features, n_c)?;
    let d = f.cols();
    let spans = enumerate_spans(n_c, sparse);
    let mut keep = vec![false; n_c * n_c];
    for &(a, b) in &spans {
        keep[a * n_c + b] = true;
    }
    let mut data = Vec::with_capacity(spans.len() * d);
    for a in 0..n_c {
        let mut acc = f.row(a).to_vec();
        for b in a..n_c {
            if b > a {
                for (s, v) in acc.iter_mut().zip(f.row(b)) {
                    *s = match pooling {
                        Pooling::Max => s.max(*v),
                        Pooling::Mean => *s + v,
                    };
                }
            }
            if keep[a * n_c + b] {
                match pooling {
                    Pooling::Max => data.extend_from_slice(&acc),
                    Pooling::Mean => data.extend(acc.iter().map(|s| s / (b - a + 1) as f64)),
                }
            }
        }
    }
    let spans_s = spans.iter().map(|&s| span_seconds(s, n_c, clips.duration_s)).collect();
    Ok(ProposalSet {
        features: Tensor::matrix(spans.len(), d, data),
        spans_clip: spans,
        spans_s,
    })
}

/// Keeps the first `max_len` tokens, warning when something is dropped.
pub fn truncate_query(mut tokens: Vec<String>, max_len: usize) -> Vec<String> {
    if tokens.len() > max_len {
        log::warn!("query of {} tokens truncated to {max_len}", tokens.len());
        tokens.truncate(max_len);
    }
    tokens
}

#[derive(Clone, Copy, Debug)]
pub struct QueryEncoding {
    /// `[L × d_q]`: forward and backward top-layer states per token.
    pub word_features: Var,
    /// `[d_q]`: forward state at the last token, backward state at the first.
    pub sentence: Var,
}

/// Runs one recurrent direction over the rows of `x`, returning the hidden
/// state after each position in input order.
fn gru_direction(tape: &mut Tape, x: Var, p: &GruCellParams<Var>, reverse: bool) -> Result<Vec<Var>> {
    let len = tape.value(x).rows();
    let h_dim = tape.value(p.w_h).rows();
    let gx_all = tape.matmul(x, p.w_x)?;
    let gx_all = tape.add_row(gx_all, p.b_x)?;
    let mut h = tape.constant(Tensor::zeros(&[1, h_dim]));
    let mut states = vec![h; len];
    let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
    for t in order {
        let gx = tape.slice_rows(gx_all, t, t + 1)?;
        let gh = tape.matmul(h, p.w_h)?;
        let gh = tape.add_row(gh, p.b_h)?;
        let xr = tape.slice_cols(gx, 0, h_dim)?;
        let hr = tape.slice_cols(gh, 0, h_dim)?;
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);
        let xz = tape.slice_cols(gx, h_dim, 2 * h_dim)?;
        let hz = tape.slice_cols(gh, h_dim, 2 * h_dim)?;
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z);
        let xn = tape.slice_cols(gx, 2 * h_dim, 3 * h_dim)?;
        let hn = tape.slice_cols(gh, 2 * h_dim, 3 * h_dim)?;
        let rn = tape.mul(r, hn)?;
        let n = tape.add(xn, rn)?;
        let n = tape.tanh(n);
        // h' = (1 - z)·n + z·h = n + z·(h - n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        h = tape.add(n, zd)?;
        states[t] = h;
    }
    Ok(states)
}

fn bi_layer(tape: &mut Tape, x: Var, fwd: &GruCellParams<Var>, bwd: &GruCellParams<Var>) -> Result<(Vec<Var>, Vec<Var>, Var)> {
    let f = gru_direction(tape, x, fwd, false)?;
    let b = gru_direction(tape, x, bwd, true)?;
    let mut rows = Vec::with_capacity(f.len());
    for (fi, bi) in f.iter().zip(&b) {
        rows.push(tape.concat_cols(&[*fi, *bi])?);
    }
    let out = tape.concat_rows(&rows)?;
    Ok((f, b, out))
}

/// Encodes a tokenized query with two stacked bidirectional gated recurrent
/// layers (gates: reset `r`, update `z`, candidate `n`):
///
/// ```text
/// r  = σ(x W_xr + b_xr + h W_hr + b_hr)
/// z  = σ(x W_xz + b_xz + h W_hz + b_hz)
/// n  = tanh(x W_xn + b_xn + r ⊙ (h W_hn + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
pub fn encode_query(tape: &mut Tape, tokens: &[String], lexicon: &EmbeddingTable, p: &BiGruParams<Var>) -> Result<QueryEncoding> {
    if tokens.is_empty() {
        return Err(CcaError::contract("cannot encode an empty query"));
    }
    let x = tape.constant(lexicon.lookup(tokens));
    if tape.value(x).cols() != tape.value(p.l0_fwd.w_x).rows() {
        return Err(CcaError::contract(format!(
            "word vectors have {} dims, the encoder expects {}",
            tape.value(x).cols(),
            tape.value(p.l0_fwd.w_x).rows()
        )));
    }
    let (_, _, first) = bi_layer(tape, x, &p.l0_fwd, &p.l0_bwd)?;
    let (f, b, word_features) = bi_layer(tape, first, &p.l1_fwd, &p.l1_bwd)?;
    let last = *f.last().expect("non-empty query");
    let sentence = tape.concat_cols(&[last, b[0]])?;
    let d = tape.value(sentence).len();
    let sentence = tape.reshape(sentence, &[d])?;
    Ok(QueryEncoding { word_features, sentence })
}

/// Query-independent inputs of the concept encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptInputs {
    /// Normalized adjacency `A`, `[M × M]`.
    pub adjacency: Tensor,
    /// `A · E`, `[M × embed_dim]`; constant because `E` is not trained.
    pub propagated: Tensor,
}

impl ConceptInputs {
    pub fn new(vocab: &ConceptVocabulary) -> Result<Self> {
        let adjacency = vocab.adjacency()?.clone();
        let propagated = matmul(&adjacency, &vocab.embeddings)?;
        Ok(ConceptInputs { adjacency, propagated })
    }

    pub fn len(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `C = A · ReLU(A · E · W1) · W2`.
pub fn encode_concepts(tape: &mut Tape, inputs: &ConceptInputs, p: &GcnParams<Var>) -> Result<Var> {
    let ae = tape.constant(inputs.propagated.clone());
    let a = tape.constant(inputs.adjacency.clone());
    let h = tape.matmul(ae, p.w1)?;
    let h = tape.relu(h);
    let h = tape.matmul(a, h)?;
    tape.matmul(h, p.w2)
}
