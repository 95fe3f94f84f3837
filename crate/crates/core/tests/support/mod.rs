//! Scalar reference implementations and the randomized suites shared by the
//! integration tests and the acceptance runner.

#![allow(dead_code, clippy::needless_range_loop)]

use cca_core::alignment::bce_loss;
use cca_core::concepts::EmbeddingTable;
use cca_core::config::AttentionScale;
use cca_core::encoders::{build_proposal_map, encode_concepts, ClipFeatures, ConceptInputs};
use cca_core::eval::{evaluate, nms};
use cca_core::interaction::{text_commonsense, visual_commonsense};
use cca_core::model::{concept_features, forward_sample, Session};
use cca_core::numerics::{grad_check, GradCheckOptions};
use cca_core::train::PreparedSample;
use cca_core::{Ablation, ModelConfig, ModelParams, Tape, Tensor, Var};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type M = Vec<Vec<f64>>;

pub fn to_m(t: &Tensor) -> M {
    let (r, c) = t.shape2();
    (0..r).map(|i| (0..c).map(|j| t.at(i, j)).collect()).collect()
}

pub fn mm(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn tr(a: &M) -> M {
    let c = a.first().map_or(0, Vec::len);
    (0..c).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn normalize(row: &[f64]) -> Vec<f64> {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 1e-12 {
        row.iter().map(|v| v / n).collect()
    } else {
        vec![0.0; row.len()]
    }
}

fn cols(a: &M, lo: usize, hi: usize) -> M {
    a.iter().map(|r| r[lo..hi].to_vec()).collect()
}

fn max_diff(a: &M, b: &Tensor) -> f64 {
    let b = to_m(b);
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Multi-head fusion over `X = [P; C]`, feed-forward with residual layer
/// norm, first `N` rows, unit rows.
pub fn visual_oracle(p: &M, c: &M, f: &cca_core::params::VisualFusionParams, heads: usize, scale: AttentionScale) -> M {
    let n = p.len();
    let mut x = p.clone();
    x.extend(c.iter().cloned());
    let q = mm(&x, &to_m(&f.w_q));
    let k = mm(&x, &to_m(&f.w_k));
    let v = mm(&x, &to_m(&f.w_v));
    let d_h = q[0].len() / heads;
    let s = match scale {
        AttentionScale::FeatureDim => (d_h as f64).sqrt(),
        AttentionScale::SequenceOverHeads => (x.len() as f64 / heads as f64).sqrt(),
    };
    let mut cat = vec![Vec::new(); x.len()];
    for h in 0..heads {
        let (qh, kh, vh) = (
            cols(&q, h * d_h, (h + 1) * d_h),
            cols(&k, h * d_h, (h + 1) * d_h),
            cols(&v, h * d_h, (h + 1) * d_h),
        );
        for i in 0..x.len() {
            let logits: Vec<f64> = (0..x.len())
                .map(|j| qh[i].iter().zip(&kh[j]).map(|(a, b)| a * b).sum::<f64>() / s)
                .collect();
            let w = softmax(&logits);
            for t in 0..d_h {
                cat[i].push((0..x.len()).map(|j| w[j] * vh[j][t]).sum());
            }
        }
    }
    let f_mul = mm(&cat, &to_m(&f.w_mul));
    let mut out = Vec::with_capacity(n);
    for row in f_mul.iter().take(n) {
        let hidden: Vec<f64> = mm(&vec![row.clone()], &to_m(&f.w_ff1))[0]
            .iter()
            .zip(f.b_ff1.data())
            .map(|(a, b)| (a + b).max(0.0))
            .collect();
        let ff: Vec<f64> = mm(&vec![hidden], &to_m(&f.w_ff2))[0]
            .iter()
            .zip(f.b_ff2.data())
            .map(|(a, b)| a + b)
            .collect();
        let d = ff.len() as f64;
        let mean = ff.iter().sum::<f64>() / d;
        let var = ff.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let ln: Vec<f64> = ff
            .iter()
            .enumerate()
            .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * f.ln_gain.data()[j] + f.ln_bias.data()[j])
            .collect();
        let fused: Vec<f64> = row.iter().zip(&ln).map(|(a, b)| a + b).collect();
        out.push(normalize(&fused));
    }
    out
}

pub fn text_oracle(q: &[f64], c: &M, t: &cca_core::params::TextAttentionParams, scale: AttentionScale) -> Vec<f64> {
    let qa = mm(&vec![q.to_vec()], &to_m(&t.w_q))[0].clone();
    let ka = mm(c, &to_m(&t.w_k));
    let vals = mm(c, &to_m(&t.w_v));
    let s = match scale {
        AttentionScale::FeatureDim => (qa.len() as f64).sqrt(),
        AttentionScale::SequenceOverHeads => (c.len() as f64).sqrt(),
    };
    let logits: Vec<f64> = ka.iter().map(|k| k.iter().zip(&qa).map(|(a, b)| a * b).sum::<f64>() / s).collect();
    let w = softmax(&logits);
    let mixed: Vec<f64> = (0..vals[0].len()).map(|j| (0..c.len()).map(|i| w[i] * vals[i][j]).sum()).collect();
    normalize(&mixed)
}

/// `D^{-1/2} G D^{-1/2}` from a raw symmetric graph, then the two-layer GCN.
pub fn gcn_oracle(g: &M, e: &M, w1: &M, w2: &M) -> (M, M) {
    let m = g.len();
    let deg: Vec<f64> = g.iter().map(|r| r.iter().sum()).collect();
    let a: M = (0..m)
        .map(|i| (0..m).map(|j| g[i][j] / (deg[i] * deg[j]).sqrt()).collect())
        .collect();
    let h: M = mm(&mm(&a, e), w1)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    (a.clone(), mm(&mm(&a, &h), w2))
}

pub fn bce_oracle(a: &[f64], y: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&ai, &yi) in a.iter().zip(y) {
        let p = 1.0 / (1.0 + (-ai).exp());
        total += yi * p.max(1e-12).ln() + (1.0 - yi) * (1.0 - p).max(1e-12).ln();
    }
    -total / a.len() as f64
}

pub fn iou_oracle(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = a.1.max(b.1) - a.0.min(b.0);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Repeatedly takes the best unsuppressed span (lowest index on ties).
pub fn nms_oracle(spans: &[(f64, f64)], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive = vec![true; spans.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..spans.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        for i in 0..spans.len() {
            if alive[i] && iou_oracle(spans[i], spans[b]) > thr {
                alive[i] = false;
            }
        }
        alive[b] = false;
    }
    kept
}

pub fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor {
    let n: usize = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Random micro configuration satisfying the model's shape rules.
pub fn micro_config(rng: &mut ChaCha8Rng, ablation: Ablation) -> ModelConfig {
    let heads = [1, 2][rng.random_range(0..2)];
    let d_v = heads * rng.random_range(1..4);
    ModelConfig {
        n_clips: rng.random_range(2..5),
        d_v,
        d_c: d_v,
        d_q: 2 * rng.random_range(1..4),
        n_heads: heads,
        d_ff: rng.random_range(2..6),
        embed_dim: rng.random_range(2..5),
        attention_scale: if rng.random_bool(0.5) {
            AttentionScale::FeatureDim
        } else {
            AttentionScale::SequenceOverHeads
        },
        qk_init_gain: 1.0,
        ablation,
        ..ModelConfig::default()
    }
}

/// Every parameter drawn uniformly, so biases, gains and `g` are nonzero.
pub fn random_params(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> ModelParams {
    ModelParams::zeros(cfg).map_named("", &mut |_, t| uniform(rng, t.dims(), 0.8))
}

/// A random symmetric nonnegative graph with unit diagonal.
pub fn random_graph(rng: &mut ChaCha8Rng, m: usize) -> Tensor {
    let mut g = Tensor::identity(m);
    for i in 0..m {
        for j in 0..i {
            let v = if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..1.0) };
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    g
}

pub struct MicroWorld {
    pub cfg: ModelConfig,
    pub params: ModelParams,
    pub graph: Tensor,
    pub embeddings: Tensor,
    pub inputs: ConceptInputs,
    pub lexicon: EmbeddingTable,
    pub words: Vec<String>,
}

pub fn micro_world(rng: &mut ChaCha8Rng, ablation: Ablation) -> MicroWorld {
    let cfg = micro_config(rng, ablation);
    let params = random_params(rng, &cfg);
    let m = rng.random_range(1..5);
    let graph = random_graph(rng, m);
    let embeddings = uniform(rng, &[m, cfg.embed_dim], 1.0);
    let adjacency = cca_core::concepts::normalize_adjacency(&graph).unwrap();
    let inputs = ConceptInputs {
        propagated: cca_core::numerics::matmul(&adjacency, &embeddings).unwrap(),
        adjacency,
    };
    let words: Vec<String> = ["pan", "stove", "knife", "cup", "egg"].iter().map(|s| s.to_string()).collect();
    let mut lexicon = EmbeddingTable::new(cfg.embed_dim);
    for w in &words[..4] {
        let v = uniform(rng, &[cfg.embed_dim], 1.0);
        lexicon.insert(w, v.data()).unwrap();
    }
    MicroWorld {
        cfg,
        params,
        graph,
        embeddings,
        inputs,
        lexicon,
        words,
    }
}

pub fn random_tokens(rng: &mut ChaCha8Rng, words: &[String]) -> Vec<String> {
    let len = rng.random_range(1..4);
    (0..len).map(|_| words[rng.random_range(0..words.len())].clone()).collect()
}

pub fn random_sample(rng: &mut ChaCha8Rng, w: &MicroWorld, id: usize) -> PreparedSample {
    let t_c = rng.random_range(1..6);
    let clips = ClipFeatures {
        video_id: format!("v{id}"),
        duration_s: rng.random_range(5.0..30.0),
        features: uniform(rng, &[t_c, w.cfg.d_v], 1.0),
    };
    let proposals = build_proposal_map(&clips, w.cfg.n_clips, w.cfg.pooling, false).unwrap();
    let a = rng.random_range(0.0..clips.duration_s * 0.8);
    let b = rng.random_range(a + 0.1..=clips.duration_s);
    let labels = Tensor::vector((0..proposals.len()).map(|_| rng.random_range(0.0..1.0)).collect());
    PreparedSample {
        id: format!("v{id}#0"),
        video_id: clips.video_id.clone(),
        proposals,
        tokens: random_tokens(rng, &w.words),
        gt_s: (a, b),
        labels,
    }
}

#[derive(Clone, Debug)]
pub struct OracleResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_err: f64,
    pub tol: f64,
}

impl OracleResult {
    pub fn ok(&self) -> bool {
        self.max_err <= self.tol
    }
}

/// Each operation against its scalar reference on `instances` random micro
/// problems.
pub fn oracle_suite(instances: usize, seed: u64) -> Vec<OracleResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 6];
    for _ in 0..instances {
        let w = micro_world(&mut rng, Ablation::Full);
        let mut tape = Tape::inference();
        let bound = w.params.bind_constant(&mut tape);

        // GCN, including the adjacency normalization
        let c = encode_concepts(&mut tape, &w.inputs, &bound.gcn).unwrap();
        let (a_ref, c_ref) = gcn_oracle(
            &to_m(&w.graph),
            &to_m(&w.embeddings),
            &to_m(&w.params.gcn.w1),
            &to_m(&w.params.gcn.w2),
        );
        worst[2] = worst[2]
            .max(max_diff(&a_ref, &w.inputs.adjacency))
            .max(max_diff(&c_ref, tape.value(c)));
        let c_val = to_m(tape.value(c));

        let n = rng.random_range(1..6);
        let p = uniform(&mut rng, &[n, w.cfg.d_v], 1.0);
        let pv = tape.constant(p.clone());
        let out = visual_commonsense(&mut tape, pv, c, &bound.fusion, &w.cfg).unwrap();
        let vref = visual_oracle(&to_m(&p), &c_val, &w.params.fusion, w.cfg.n_heads, w.cfg.attention_scale);
        worst[0] = worst[0].max(max_diff(&vref, tape.value(out)));

        let q = uniform(&mut rng, &[w.cfg.d_q], 1.0);
        let qv = tape.constant(q.clone());
        let out = text_commonsense(&mut tape, qv, c, &bound.text, &w.cfg).unwrap();
        let tref = text_oracle(q.data(), &c_val, &w.params.text, w.cfg.attention_scale);
        worst[1] = worst[1].max(max_diff(&vec![tref], &tape.value(out).reshape(&[1, w.cfg.d_q]).unwrap()));

        let k = rng.random_range(1..20);
        let logits = uniform(&mut rng, &[k], 12.0);
        let labels = Tensor::vector((0..k).map(|_| rng.random_range(0.0..1.0)).collect());
        let got = bce_loss(&logits, &labels).unwrap();
        worst[3] = worst[3].max((got - bce_oracle(logits.data(), labels.data())).abs());

        let spans: Vec<(f64, f64)> = (0..rng.random_range(1..15))
            .map(|_| {
                let a = rng.random_range(0.0..10.0);
                (a, a + rng.random_range(0.1..5.0))
            })
            .collect();
        // coarse scores so ties occur
        let scores: Vec<f64> = spans.iter().map(|_| f64::from(rng.random_range(0..4))).collect();
        let thr = rng.random_range(0.0..1.0);
        let got = nms(&spans, &scores, thr).unwrap();
        worst[4] = worst[4].max(if got == nms_oracle(&spans, &scores, thr) {
            0.0
        } else {
            f64::INFINITY
        });

        worst[5] = worst[5].max(evaluate_vs_oracle(&mut rng, &w));
    }
    let names = [
        "visual_commonsense",
        "text_commonsense",
        "encode_concepts",
        "bce_loss",
        "nms",
        "evaluate",
    ];
    let tols = [1e-9, 1e-9, 1e-10, 1e-10, 0.0, 1e-9];
    names
        .iter()
        .zip(tols)
        .zip(worst)
        .map(|((&name, tol), max_err)| OracleResult {
            name,
            instances,
            max_err,
            tol,
        })
        .collect()
}

/// Recall table from `evaluate` against one built from end-to-end forward
/// scores, the scalar NMS and brute-force hit counting.
fn evaluate_vs_oracle(rng: &mut ChaCha8Rng, w: &MicroWorld) -> f64 {
    let samples: Vec<PreparedSample> = (0..rng.random_range(1..5)).map(|i| random_sample(rng, w, i)).collect();
    let thr = 0.49;
    let mut session = Session::new(w.cfg.clone(), &w.params, &w.inputs, w.lexicon.clone()).unwrap();
    let report = evaluate(&mut session, &samples, thr).unwrap();
    let mut hits = [[0.0; 4]; 2];
    for s in &samples {
        let (a, _, _) = session.forward(&s.proposals.features, &s.tokens).unwrap();
        let kept = nms_oracle(&s.proposals.spans_s, a.data(), thr);
        for (ni, n) in [1usize, 5].into_iter().enumerate() {
            for (ti, t) in [0.1, 0.3, 0.5, 0.7].into_iter().enumerate() {
                if kept.iter().take(n).any(|&i| iou_oracle(s.proposals.spans_s[i], s.gt_s) > t) {
                    hits[ni][ti] += 100.0 / samples.len() as f64;
                }
            }
        }
    }
    let got = [report.r_at_1, report.r_at_5];
    let mut err: f64 = 0.0;
    for ni in 0..2 {
        for ti in 0..4 {
            err = err.max((got[ni][ti] - hits[ni][ti]).abs());
        }
    }
    err.max((report.sum_acc - hits[0][1] - hits[0][2]).abs())
}

#[derive(Clone, Debug)]
pub struct GradResult {
    pub group: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Full-loss gradient check per parameter group at micro shapes, worst case
/// over `seeds`.
pub fn gradient_suite(seeds: std::ops::Range<u64>) -> Vec<GradResult> {
    let mut groups: Vec<GradResult> = Vec::new();
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        // layer norm over fewer than four features is nearly singular
        let mut w = micro_world(&mut rng, Ablation::Full);
        while w.cfg.d_v < 4 || w.cfg.d_ff < 3 {
            w = micro_world(&mut rng, Ablation::Full);
        }
        w.params = w.params.map_named("", &mut |_, t| t.scale(0.6));
        let samples: Vec<PreparedSample> = (0..2).map(|i| random_sample(&mut rng, &w, i)).collect();
        let named = w.params.named_tensors();
        let tensors: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();
        let cfg = w.cfg.clone();
        let opts = GradCheckOptions {
            // balances rounding on ~1e-9 gradients against truncation
            h: 3e-4,
            seed,
            ..GradCheckOptions::default()
        };
        let report = grad_check(&tensors, &opts, |tape: &mut Tape, vars: &[Var]| {
            let mut it = vars.iter().copied();
            let bound = w.params.map_named("", &mut |_, _| it.next().expect("one var per tensor"));
            let concepts = concept_features(tape, &bound, &w.inputs, &cfg)?;
            let mut total: Option<Var> = None;
            for s in &samples {
                let out = forward_sample(tape, &bound, concepts, &s.proposals.features, &s.tokens, &w.lexicon, &cfg)?;
                let l = tape.bce_with_logits(out.scores.a, &s.labels)?;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            Ok(tape.scale(total.expect("two samples"), 0.5))
        })
        .unwrap();
        for ((name, t), err) in named.iter().zip(&report.per_param) {
            // the common-space group is split into φ1, φ2 and g
            let depth = if name.starts_with("space.") { 2 } else { 1 };
            let group = name.split('.').take(depth).collect::<Vec<_>>().join(".");
            let entry = match groups.iter_mut().position(|g| g.group == group) {
                Some(i) => &mut groups[i],
                None => {
                    groups.push(GradResult {
                        group,
                        max_rel_error: 0.0,
                        checked: 0,
                    });
                    groups.last_mut().unwrap()
                }
            };
            entry.max_rel_error = entry.max_rel_error.max(*err);
            entry.checked += t.len();
        }
    }
    groups
}

/// A synthetic dataset with its vocabulary and prepared splits.
pub struct SynthRun {
    pub data: cca_core::synth::SynthDataset,
    pub cfg: cca_core::TrainConfig,
    pub vocab: cca_core::concepts::ConceptVocabulary,
    pub stop: cca_core::concepts::StopWords,
    pub inputs: ConceptInputs,
    pub train: Vec<PreparedSample>,
    pub eval: Vec<PreparedSample>,
}

pub fn synth_run(synth: &cca_core::synth::SynthConfig, cfg: cca_core::TrainConfig) -> SynthRun {
    use cca_core::concepts::{select_concepts, StopWords};
    use cca_core::train::prepare_samples;
    let stop = StopWords::default();
    let data = cca_core::synth::generate_synthetic(synth).unwrap();
    let mut vocab = select_concepts(&data.train, cfg.min_freq, &data.embeddings, &stop).unwrap();
    vocab.build_graph(&data.train, &stop).unwrap();
    let feats: std::collections::HashMap<_, _> = data.features.clone().into_iter().collect();
    let mc = cfg.model();
    let train = prepare_samples(&data.train, &feats, &mc, cfg.t_min, cfg.t_max, &stop).unwrap();
    let eval = prepare_samples(&data.eval, &feats, &mc, cfg.t_min, cfg.t_max, &stop).unwrap();
    let inputs = ConceptInputs::new(&vocab).unwrap();
    SynthRun {
        data,
        cfg,
        vocab,
        stop,
        inputs,
        train,
        eval,
    }
}

impl SynthRun {
    pub fn session(&self, params: &ModelParams) -> Session {
        Session::new(self.cfg.model(), params, &self.inputs, self.vocab.lexicon.clone()).unwrap()
    }
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub pairs: usize,
    /// Largest |gallery score − forward score| over all proposals.
    pub max_score_err: f64,
    /// Whether every query ranking equals NMS over the forward scores.
    pub rankings_match: bool,
    /// Fusion-block executions during the query calls.
    pub query_fusions: u64,
}

/// Every query of a `videos × queries` grid answered from a precomputed
/// gallery and, separately, end to end from raw clip features.
pub fn gallery_grid(seed: u64, videos: usize, queries: usize) -> GridResult {
    use cca_core::gallery::{precompute_gallery, QueryEngine};
    use cca_core::interaction::fusion_calls;
    use cca_core::io::ModelArchive;
    use cca_core::synth::SynthConfig;

    let synth = SynthConfig {
        seed,
        n_train: videos.max(queries),
        n_eval: 1,
        ..SynthConfig::default()
    };
    let cfg = cca_core::TrainConfig {
        seed,
        ..cca_core::TrainConfig::default()
    };
    let run = synth_run(&synth, cfg);
    let archive = ModelArchive::new(run.cfg.model(), &ModelParams::init(&run.cfg.model(), seed));
    let clips: Vec<ClipFeatures> = run.data.features.values().take(videos).cloned().collect();
    let gallery = precompute_gallery(&archive, &run.vocab, &clips).unwrap();
    let mut engine = QueryEngine::new(&archive, &run.vocab, run.stop.clone(), run.cfg.nms_threshold).unwrap();
    let sentences: Vec<&cca_core::concepts::Sample> = run.data.train.samples.iter().take(queries).collect();

    let mut out = GridResult {
        pairs: 0,
        max_score_err: 0.0,
        rankings_match: true,
        query_fusions: 0,
    };
    for clip in &clips {
        let entry = gallery.entry(&clip.video_id).unwrap();
        let proposals = build_proposal_map(clip, run.cfg.n_clips, run.cfg.model().pooling, run.cfg.model().sparse_proposals).unwrap();
        for s in &sentences {
            let before = fusion_calls();
            let result = engine.query(&gallery, &clip.video_id, &s.sentence, usize::MAX).unwrap();
            out.query_fusions += fusion_calls() - before;

            let tokens = cca_core::encoders::truncate_query(cca_core::concepts::tokenize(&s.sentence, &run.stop), run.cfg.max_query_len);
            let session = engine.session();
            let (a, _, _) = session.forward(&proposals.features, &tokens).unwrap();
            let q = session.encode_sentence(&tokens).unwrap();
            let stored = session.score_projected(&entry.g1, &entry.g2, &q).unwrap();
            out.max_score_err = out.max_score_err.max(stored.max_abs_diff(&a));

            let kept = nms_oracle(&proposals.spans_s, a.data(), run.cfg.nms_threshold);
            let expected: Vec<(f64, f64)> = kept.iter().map(|&i| proposals.spans_s[i]).collect();
            let got: Vec<(f64, f64)> = result.ranking.iter().map(|r| (r.start_s, r.end_s)).collect();
            let scores_close = kept
                .iter()
                .zip(&result.ranking)
                .all(|(&i, r)| (a.data()[i] - r.score).abs() <= 1e-6);
            out.rankings_match &= got == expected && scores_close;
            out.pairs += 1;
        }
    }
    out
}
