use petal::config::RunConfig;
use petal::dma::{AttentionKind, ModalityTag, Slot};
use petal::former::{build_frozen_backbone, dump_attention, forward, reference_logits, Backbone, FormerConfig, Frozen, Projector, Site};
use petal::model::{Ablation, Method};
use petal::moe::ExpertForm;
use petal::params::Parameters;
use petal::train::prepare;
use petal::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

fn small_run(method: Method, ablation: Ablation, form: ExpertForm) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.expert_form = form;
    cfg.train.method = method;
    cfg.train.ablation = ablation;
    cfg.task.n_train = 4;
    cfg.task.n_val = 4;
    cfg
}

#[test]
fn zero_delta_start_equals_reference_forward() {
    for form in [ExpertForm::Bottleneck, ExpertForm::Affine] {
        for ablation in [Ablation::None, Ablation::V1, Ablation::V4] {
            let cfg = small_run(Method::Petal, ablation, form);
            let (model, data) = prepare(&cfg).unwrap();
            let banks = model.banks.as_ref().unwrap();
            for bank in [&banks.self_bank, &banks.cross_bank] {
                let slots: Vec<Slot> = bank.slots().map(|(s, _)| s).collect();
                for m in bank.modalities() {
                    for &s in &slots {
                        assert_eq!(bank.delta_weight_value(m, s).unwrap().max_abs(), 0.0);
                    }
                }
            }
            for it in data.train.iter().chain(&data.val) {
                let got = model.logits(&it.vision, it.question).unwrap();
                let instr = model.backbone.instruction_value(&model.template_ids, it.question).unwrap();
                let want = reference_logits(&model.backbone, &it.vision, &instr).unwrap();
                let d = rel_diff(got.data(), &want);
                assert!(d <= 1e-9, "{form:?} {ablation}: {d:e}");
            }
        }
    }
}

#[test]
fn lora_start_equals_reference_forward() {
    let cfg = small_run(Method::Lora, Ablation::None, ExpertForm::Bottleneck);
    let (model, data) = prepare(&cfg).unwrap();
    for it in &data.val {
        let got = model.logits(&it.vision, it.question).unwrap();
        let instr = model.backbone.instruction_value(&model.template_ids, it.question).unwrap();
        let want = reference_logits(&model.backbone, &it.vision, &instr).unwrap();
        assert!(rel_diff(got.data(), &want) <= 1e-9);
    }
}

// Scalar re-derivation of one block with one head, one query and one
// instruction token.

fn lin(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (o, i) = w.dims2().unwrap();
    assert_eq!(x.len(), i);
    (0..o).map(|r| (0..i).map(|c| w.at2(r, c) * x[c]).sum()).collect()
}

fn ln(x: &[f64], g: &Tensor, b: &Tensor) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g.data()[j] + b.data()[j])
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// softmax-weighted sum of `values` with scores `q·k_j / sqrt(d)`.
fn attend(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = q.len() as f64;
    let s: Vec<f64> = keys.iter().map(|k| dot(q, k) / d.sqrt()).collect();
    let z: f64 = s.iter().map(|v| v.exp()).sum();
    let w: Vec<f64> = s.iter().map(|v| v.exp() / z).collect();
    let mut out = vec![0.0; values[0].len()];
    for (wj, v) in w.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += wj * x;
        }
    }
    (out, w)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn tiny_backbone() -> (Backbone, Vec<Vec<f64>>, Vec<f64>) {
    let cfg = FormerConfig {
        layers: 1,
        hidden: 3,
        vision: 2,
        heads: 1,
        queries: 1,
        vocab: 3,
        ffn_mult: 2,
        word_buckets: 4,
        questions: 1,
        init_gain: None,
    };
    let mut bb = build_frozen_backbone(&cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    bb.visit_mut(&mut |_, t| {
        for v in t.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    });
    let vision = vec![vec![0.3, -0.7], vec![1.1, 0.2], vec![-0.4, 0.9]];
    let instr = vec![0.5, -0.2, 0.8];
    (bb, vision, instr)
}

fn hand_logits(bb: &Backbone, vision: &[Vec<f64>], instr: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let b = &bb.blocks[0];
    let w = |k, s| b.weight(k, s);
    let hq = bb.queries.data().to_vec();
    let hi = instr.to_vec();

    let sa = AttentionKind::SelfAttn;
    let toks = [hq.clone(), hi.clone()];
    let q: Vec<_> = toks.iter().map(|x| lin(x, w(sa, Slot::Query))).collect();
    let k: Vec<_> = toks.iter().map(|x| lin(x, w(sa, Slot::Key))).collect();
    let v: Vec<_> = toks.iter().map(|x| lin(x, w(sa, Slot::Value))).collect();
    let (cq, _) = attend(&q[0], &k, &v);
    let hq = ln(&add(&hq, &lin(&cq, w(sa, Slot::Output))), &b.ln1.gain, &b.ln1.bias);

    let ca = AttentionKind::Cross;
    let qq = lin(&hq, w(ca, Slot::Query));
    let ks: Vec<_> = vision.iter().map(|x| lin(x, w(ca, Slot::Key))).collect();
    let vs: Vec<_> = vision.iter().map(|x| lin(x, w(ca, Slot::Value))).collect();
    let (ctx, map) = attend(&qq, &ks, &vs);
    let hq = ln(&add(&hq, &lin(&ctx, w(ca, Slot::Output))), &b.ln2.gain, &b.ln2.bias);

    let ffn = |x: &[f64]| {
        let a: Vec<f64> = add(&lin(x, &b.ffn_w1), b.ffn_b1.data()).into_iter().map(gelu).collect();
        add(&lin(&a, &b.ffn_w2), b.ffn_b2.data())
    };
    let hq = ln(&add(&hq, &ffn(&hq)), &b.ln3.gain, &b.ln3.bias);
    let logits = add(&lin(&hq, &bb.classifier.w), bb.classifier.b.data());
    (logits, map)
}

#[test]
fn one_layer_forward_matches_hand_computation() {
    let (bb, vision, instr) = tiny_backbone();
    let (want, want_map) = hand_logits(&bb, &vision, &instr);

    let vis = Tensor::from_rows(&vision.iter().map(|r| r.as_slice()).collect::<Vec<_>>());
    let mut tape = Tape::new();
    let iv = tape.constant(&Tensor::from_rows(&[&instr]));
    let out = forward(&mut tape, &bb.view(), &Frozen, &vis, iv).unwrap();
    let got = tape.value(out.logits).data().to_vec();
    assert!(rel_diff(&got, &want) <= 1e-12, "{got:?} vs {want:?}");
    assert!(rel_diff(out.attention[0][0].data(), &want_map) <= 1e-12);

    let r = reference_logits(&bb, &vis, &Tensor::from_rows(&[&instr])).unwrap();
    assert!(rel_diff(&r, &want) <= 1e-12);
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = small_run(Method::Petal, Ablation::None, ExpertForm::Bottleneck);
    let (model, data) = prepare(&cfg).unwrap();
    let fc = *model.config();
    for it in &data.val {
        let mut tape = Tape::new();
        let out = model.forward_sample(&mut tape, &it.vision, it.question).unwrap();
        assert_eq!(out.former.attention.len(), fc.layers);
        for heads in &out.former.attention {
            assert_eq!(heads.len(), fc.heads);
            for map in heads {
                let (r, c) = map.dims2().unwrap();
                assert_eq!((r, c), (fc.queries, it.vision.shape()[0]));
                for i in 0..r {
                    let s: f64 = (0..c).map(|j| map.at2(i, j)).sum();
                    assert!((s - 1.0).abs() <= 1e-12);
                    assert!((0..c).all(|j| map.at2(i, j) >= 0.0));
                }
            }
        }
    }
}

#[test]
fn attention_dump_layout_and_determinism() {
    let cfg = small_run(Method::Petal, Ablation::None, ExpertForm::Bottleneck);
    let (model, data) = prepare(&cfg).unwrap();
    let fc = *model.config();
    let it = &data.val[0];
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for name in ["a.csv", "b.csv"] {
        let mut tape = Tape::new();
        let out = model.forward_sample(&mut tape, &it.vision, it.question).unwrap();
        let path = dir.path().join(name);
        dump_attention(&out.former.attention, &path).unwrap();
        bytes.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    let text = String::from_utf8(bytes.remove(0)).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), fc.layers * fc.heads * fc.queries);
    for row in rows {
        let cells: Vec<f64> = row.split(',').skip(3).map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells.len(), it.vision.shape()[0]);
        assert!((cells.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
}

/// Records which modality each projection call was tagged with.
struct Recorder(std::cell::RefCell<Vec<(AttentionKind, Slot, ModalityTag, usize)>>);

impl Projector for Recorder {
    fn project(&self, tape: &mut Tape, w0: Var, x: Var, site: Site) -> Result<Var> {
        let rows = tape.shape(x)[0];
        self.0.borrow_mut().push((site.kind, site.slot, site.modality, rows));
        Frozen.project(tape, w0, x, site)
    }
}

#[test]
fn streams_are_tagged_with_their_modality() {
    let cfg = FormerConfig::default();
    let bb = build_frozen_backbone(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let vis = Tensor::randn(&[5, cfg.vision], 1.0, &mut rng);
    let t = 7;
    let instr = Tensor::randn(&[t, cfg.hidden], 1.0, &mut rng);
    let rec = Recorder(Default::default());
    let mut tape = Tape::new();
    let iv = tape.constant(&instr);
    forward(&mut tape, &bb.view(), &rec, &vis, iv).unwrap();
    let calls = rec.0.into_inner();
    for &(kind, slot, m, rows) in &calls {
        match kind {
            AttentionKind::Cross => assert_eq!(m, ModalityTag::QueryStream),
            AttentionKind::SelfAttn => {
                let want = if m == ModalityTag::QueryStream { cfg.queries } else { t };
                assert_eq!(rows, want, "{slot}");
            }
        }
    }
    // per layer: 4 self slots × 2 streams + 4 cross slots
    assert_eq!(calls.len(), cfg.layers * 12);
}

#[test]
fn gradients_reach_every_petal_tensor() {
    let cfg = small_run(Method::Petal, Ablation::None, ExpertForm::Bottleneck);
    let (mut model, data) = prepare(&cfg).unwrap();
    petal::gradsuite::randomize_trainable(&mut model, 0.3, 4);
    let items: Vec<_> = data.train.iter().collect();
    let mut tape = Tape::new();
    let loss = model.batch_loss(&mut tape, &items, &cfg.train.ib()).unwrap();
    tape.backward(loss.loss).unwrap();
    for name in model.trainable_names() {
        if name == "moe.gate.b" {
            // cancels inside the softmax over experts
            assert!(tape.param_grad(&name).is_none_or(|g| g.iter().all(|v| *v == 0.0)));
            continue;
        }
        let g = tape.param_grad(&name).unwrap_or_else(|| panic!("{name} not on tape"));
        assert!(g.iter().any(|v| *v != 0.0), "{name} has zero gradient");
    }
}
