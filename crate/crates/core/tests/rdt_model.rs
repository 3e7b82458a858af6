mod common;

use common::{random_tensor, rng, synthetic, vocab};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rdt_core::model::layers::{
    classify_head, dense_encoder_stack, encoder_block, multi_head_self_attention, AttentionVars, Connectivity,
    EncoderVars, HeadVars, LayerNormVars, MlpVars,
};
use rdt_core::model::{load_checkpoint, save_checkpoint, Architecture, ModelConfig, PosterModel};
use rdt_core::patch::{
    embed_sequence, extract_features, reassemble_patches, split_patches, ConvBlockVars, EmbedVars, PatchConfig,
};
use rdt_core::tensor::{Activation, Graph, Tensor, Var};
use rdt_core::train::{asl_graph, AslConfig};

const EPS: f64 = 1e-6;

/// Raw encoder weights, kept so the scalar oracle can read them directly.
struct EncRaw {
    ln1: (Tensor, Tensor),
    q: Vec<Tensor>,
    k: Vec<Tensor>,
    v: Vec<Tensor>,
    o: Tensor,
    ln2: (Tensor, Tensor),
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

fn random_encoder(r: &mut ChaCha8Rng, d: usize, h: usize) -> EncRaw {
    let dk = d / h;
    EncRaw {
        ln1: (random_tensor(r, &[d], 1.0), random_tensor(r, &[d], 0.5)),
        q: (0..h).map(|_| random_tensor(r, &[d, dk], 0.8)).collect(),
        k: (0..h).map(|_| random_tensor(r, &[d, dk], 0.8)).collect(),
        v: (0..h).map(|_| random_tensor(r, &[d, dk], 0.8)).collect(),
        o: random_tensor(r, &[h * dk, d], 0.8),
        ln2: (random_tensor(r, &[d], 1.0), random_tensor(r, &[d], 0.5)),
        w1: random_tensor(r, &[d, 2 * d], 0.8),
        b1: random_tensor(r, &[2 * d], 0.3),
        w2: random_tensor(r, &[2 * d, d], 0.8),
        b2: random_tensor(r, &[d], 0.3),
    }
}

fn zero_sublayers(d: usize, h: usize) -> EncRaw {
    let dk = d / h;
    EncRaw {
        ln1: (Tensor::ones(&[d]), Tensor::zeros(&[d])),
        q: vec![Tensor::zeros(&[d, dk]); h],
        k: vec![Tensor::zeros(&[d, dk]); h],
        v: vec![Tensor::zeros(&[d, dk]); h],
        o: Tensor::zeros(&[h * dk, d]),
        ln2: (Tensor::ones(&[d]), Tensor::zeros(&[d])),
        w1: Tensor::zeros(&[d, 2 * d]),
        b1: Tensor::zeros(&[2 * d]),
        w2: Tensor::zeros(&[2 * d, d]),
        b2: Tensor::zeros(&[d]),
    }
}

fn bind(g: &mut Graph, e: &EncRaw) -> EncoderVars {
    let mut p = |t: &Tensor| g.param(t.clone());
    EncoderVars {
        ln1: LayerNormVars { gain: p(&e.ln1.0), bias: p(&e.ln1.1) },
        attention: AttentionVars {
            query: e.q.iter().map(&mut p).collect(),
            key: e.k.iter().map(&mut p).collect(),
            value: e.v.iter().map(&mut p).collect(),
            output: p(&e.o),
        },
        ln2: LayerNormVars { gain: p(&e.ln2.0), bias: p(&e.ln2.1) },
        mlp: MlpVars { w1: p(&e.w1), b1: p(&e.b1), w2: p(&e.w2), b2: p(&e.b2) },
    }
}

// ---- straight-line scalar oracle -------------------------------------------------

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    let cols = t.last_dim();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            for k in 0..b.len() {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn ln_rows(x: &Mat, g: &Tensor, b: &Tensor) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + EPS).sqrt() * g.data()[i] + b.data()[i])
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn oracle_encoder(z: &Mat, e: &EncRaw) -> Mat {
    let n1 = ln_rows(z, &e.ln1.0, &e.ln1.1);
    let dk = e.q[0].shape()[1];
    let mut cat: Mat = vec![Vec::new(); z.len()];
    for h in 0..e.q.len() {
        let q = mm(&n1, &mat(&e.q[h]));
        let k = mm(&n1, &mat(&e.k[h]));
        let v = mm(&n1, &mat(&e.v[h]));
        for i in 0..z.len() {
            let s: Vec<f64> = (0..z.len())
                .map(|j| (0..dk).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::MIN, f64::max);
            let ex: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let tot: f64 = ex.iter().sum();
            for c in 0..dk {
                cat[i].push((0..z.len()).map(|j| ex[j] / tot * v[j][c]).sum());
            }
        }
    }
    let z1 = add(&mm(&cat, &mat(&e.o)), z);
    let n2 = ln_rows(&z1, &e.ln2.0, &e.ln2.1);
    let gelu = |x: f64| 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let hdn: Mat = mm(&n2, &mat(&e.w1))
        .into_iter()
        .map(|r| r.iter().enumerate().map(|(i, v)| gelu(v + e.b1.data()[i])).collect())
        .collect();
    let m: Mat = mm(&hdn, &mat(&e.w2))
        .into_iter()
        .map(|r| r.iter().enumerate().map(|(i, v)| v + e.b2.data()[i]).collect())
        .collect();
    add(&m, &z1)
}

// ---- patch front end ---------------------------------------------------------------

#[test]
fn split_then_reassemble_is_identity() {
    let mut r = rng(1);
    for (side, p) in [(64, 16), (32, 32), (24, 8)] {
        let cfg = PatchConfig { image_side: side, patch_side: p, ..PatchConfig::desk() };
        let img = random_tensor(&mut r, &[side, side, 3], 1.0);
        let patches = split_patches(&img, &cfg).unwrap();
        assert_eq!(patches.len(), (side / p) * (side / p));
        assert_eq!(reassemble_patches(&patches, &cfg).unwrap(), img);
    }
    let cfg = PatchConfig { image_side: 32, patch_side: 32, ..PatchConfig::desk() };
    let img = random_tensor(&mut r, &[32, 32, 3], 1.0);
    assert_eq!(split_patches(&img, &cfg).unwrap()[0], img);
    assert!(split_patches(&random_tensor(&mut r, &[16, 16, 3], 1.0), &cfg).is_err());
}

#[test]
fn patch_order_is_row_major() {
    let cfg = PatchConfig { image_side: 4, patch_side: 2, channels: 1, ..PatchConfig::desk() };
    let img = Tensor::new(vec![4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
    let p = split_patches(&img, &cfg).unwrap();
    assert_eq!(p[0].data(), &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(p[1].data(), &[2.0, 3.0, 6.0, 7.0]);
    assert_eq!(p[2].data(), &[8.0, 9.0, 12.0, 13.0]);
}

fn conv_blocks(g: &mut Graph, r: &mut ChaCha8Rng, channels: &[usize], zero_bias: bool) -> Vec<ConvBlockVars> {
    let mut cin = 3;
    channels
        .iter()
        .map(|&c| {
            let kernel = g.param(random_tensor(r, &[3, 3, cin, c], 0.5));
            let bias = if zero_bias { Tensor::zeros(&[c]) } else { random_tensor(r, &[c], 0.5) };
            let bias = g.param(bias);
            cin = c;
            ConvBlockVars { kernel, bias }
        })
        .collect()
}

#[test]
fn extractor_shares_weights_and_annihilates_zero() {
    let mut r = rng(2);
    let mut g = Graph::new();
    let blocks = conv_blocks(&mut g, &mut r, &[8, 32], true);
    let patch = random_tensor(&mut r, &[16, 16, 3], 1.0);
    let mut data = patch.data().to_vec();
    data.extend_from_slice(patch.data());
    data.extend(vec![0.0; 16 * 16 * 3]);
    let x = g.constant(Tensor::new(vec![3, 16, 16, 3], data).unwrap());
    let f = extract_features(&mut g, x, &blocks, Activation::Gelu).unwrap();
    let out = g.value(f);
    assert_eq!(out.shape(), &[3, 32]);
    assert_eq!(out.row(0), out.row(1));
    assert!(out.row(2).iter().all(|&v| v == 0.0));
}

#[test]
fn constant_patch_through_known_kernel() {
    // 4x4 constant patch c, 3x3 all-ones kernel, zero padding: corners see 4c,
    // edges 6c, interior 9c. Every 2x2 pool block holds one of each corner/edge
    // pair plus an interior pixel: (4 + 6 + 6 + 9) c / 4 = 6.25 c.
    let mut g = Graph::new();
    let c = 0.8;
    let x = g.constant(Tensor::full(&[1, 4, 4, 1], c));
    let kernel = g.param(Tensor::ones(&[3, 3, 1, 1]));
    let bias = g.param(Tensor::zeros(&[1]));
    let f = extract_features(&mut g, x, &[ConvBlockVars { kernel, bias }], Activation::Relu).unwrap();
    assert!((g.value(f).data()[0] - 6.25 * c).abs() < 1e-12);
}

fn embed_params(g: &mut Graph, r: &mut ChaCha8Rng, n_p: usize, f: usize, d: usize) -> EmbedVars {
    EmbedVars {
        projection: g.param(random_tensor(r, &[f, d], 1.0)),
        positions: g.param(random_tensor(r, &[n_p + 1, d], 1.0)),
        class_token: g.param(random_tensor(r, &[d], 1.0)),
    }
}

#[test]
fn embedding_annihilation_and_row_count() {
    let mut r = rng(3);
    let mut g = Graph::new();
    let feats = g.constant(random_tensor(&mut r, &[16, 5], 1.0));
    let class = random_tensor(&mut r, &[4], 1.0);
    let p = EmbedVars {
        projection: g.param(Tensor::zeros(&[5, 4])),
        positions: g.param(Tensor::zeros(&[17, 4])),
        class_token: g.param(class.clone()),
    };
    let z0 = embed_sequence(&mut g, feats, &p).unwrap();
    let v = g.value(z0);
    assert_eq!(v.shape(), &[17, 4]);
    assert_eq!(v.row(0), class.data());
    assert!(v.data()[4..].iter().all(|&x| x == 0.0));
}

#[test]
fn embedding_is_affine_in_features() {
    // z0(a) + z0(b) - z0(0) == z0(a + b): linear part plus a constant offset.
    let mut r = rng(4);
    let a = random_tensor(&mut r, &[2, 16, 6], 1.0);
    let b = random_tensor(&mut r, &[2, 16, 6], 1.0);
    let sum = Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap();
    let mut g = Graph::new();
    let p = embed_params(&mut g, &mut r, 16, 6, 8);
    let mut run = |t: &Tensor| {
        let x = g.constant(t.clone());
        let z = embed_sequence(&mut g, x, &p).unwrap();
        g.value(z).clone()
    };
    let (za, zb, zs, z0) = (run(&a), run(&b), run(&sum), run(&Tensor::zeros(&[2, 16, 6])));
    for i in 0..za.numel() {
        let lhs = za.data()[i] + zb.data()[i] - z0.data()[i];
        assert!((lhs - zs.data()[i]).abs() < 1e-9);
    }
}

// ---- attention and encoder ---------------------------------------------------------

#[test]
fn single_token_attention_is_value_path() {
    let mut r = rng(5);
    let e = random_encoder(&mut r, 8, 2);
    let mut g = Graph::new();
    let p = bind(&mut g, &e);
    let z = g.constant(random_tensor(&mut r, &[1, 8], 1.0));
    let (out, w) = multi_head_self_attention(&mut g, z, &p.attention).unwrap();
    for a in &w {
        assert_eq!(g.value(*a).data(), &[1.0]);
    }
    let zm = mat(g.value(z));
    let mut cat = Vec::new();
    for v in &e.v {
        cat.extend(mm(&zm, &mat(v))[0].clone());
    }
    let expect = mm(&vec![cat], &mat(&e.o));
    for (x, y) in g.value(out).data().iter().zip(&expect[0]) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn full_scale_head_geometry() {
    let mut cfg = ModelConfig::desk(13);
    cfg.patch.embed_dim = 256;
    cfg.heads = 6;
    cfg.layers = 1;
    cfg.patch.image_side = 16;
    assert_eq!(cfg.head_dim(), 42);
    let m = PosterModel::new(cfg, rdt_core::data::GenreVocabulary::default(), 0).unwrap();
    assert_eq!(m.params.get("enc0.attn.q0").unwrap().shape(), &[256, 42]);
    assert_eq!(m.params.get("enc0.attn.o").unwrap().shape(), &[252, 256]);
    assert_eq!(m.params.get("enc0.mlp.w1").unwrap().shape(), &[256, 512]);
    assert_eq!(m.params.get("head.w1").unwrap().shape(), &[256, 128]);
    assert_eq!(m.params.get("head.w2").unwrap().shape(), &[128, 13]);
}

#[test]
fn attention_is_permutation_equivariant() {
    let mut r = rng(6);
    for _ in 0..10 {
        let e = random_encoder(&mut r, 8, 2);
        let z = random_tensor(&mut r, &[4, 8], 1.0);
        let mut perm: Vec<usize> = (0..4).collect();
        perm.shuffle(&mut r);
        let zp = Tensor::new(vec![4, 8], perm.iter().flat_map(|&i| z.row(i).to_vec()).collect()).unwrap();
        let mut g = Graph::new();
        let p = bind(&mut g, &e);
        let (x, xp) = (g.constant(z), g.constant(zp));
        let (o, _) = multi_head_self_attention(&mut g, x, &p.attention).unwrap();
        let (op, _) = multi_head_self_attention(&mut g, xp, &p.attention).unwrap();
        for (new_row, &old_row) in perm.iter().enumerate() {
            for (a, b) in g.value(op).row(new_row).iter().zip(g.value(o).row(old_row)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn encoder_block_matches_scalar_oracle() {
    let mut r = rng(7);
    for _ in 0..20 {
        let e = random_encoder(&mut r, 4, 2);
        let z = random_tensor(&mut r, &[2, 4], 1.5);
        let mut g = Graph::new();
        let p = bind(&mut g, &e);
        let x = g.constant(z.clone());
        let (out, _) = encoder_block(&mut g, x, &p, EPS).unwrap();
        let expect = oracle_encoder(&mat(&z), &e);
        for (a, b) in g.value(out).data().iter().zip(expect.concat()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn encoder_shape_and_zero_sublayer_identity() {
    let mut r = rng(8);
    for t in [1, 4, 17] {
        let mut g = Graph::new();
        let p = bind(&mut g, &random_encoder(&mut r, 8, 4));
        let x = g.constant(random_tensor(&mut r, &[t, 8], 1.0));
        let (out, _) = encoder_block(&mut g, x, &p, EPS).unwrap();
        assert_eq!(g.shape(out), &[t, 8]);

        let z = random_tensor(&mut r, &[3, t, 8], 1.0);
        let mut g = Graph::new();
        let p = bind(&mut g, &zero_sublayers(8, 4));
        let x = g.constant(z.clone());
        let (out, _) = encoder_block(&mut g, x, &p, EPS).unwrap();
        assert!(g.value(out).max_abs_diff(&z).unwrap() < 1e-9);
    }
}

fn stack_output(encs: &[EncRaw], transitions: Option<Vec<Tensor>>, z0: &Tensor) -> (Tensor, usize) {
    let d = z0.last_dim();
    let mut g = Graph::new();
    let vars: Vec<EncoderVars> = encs.iter().map(|e| bind(&mut g, e)).collect();
    let conn = match transitions {
        Some(ts) => Connectivity::Dense(ts.into_iter().map(|t| g.param(t)).collect()),
        None => Connectivity::Sequential,
    };
    let ln = LayerNormVars { gain: g.param(Tensor::ones(&[d])), bias: g.param(Tensor::zeros(&[d])) };
    let x = g.constant(z0.clone());
    let (y, w) = dense_encoder_stack(&mut g, x, &vars, &conn, ln, EPS).unwrap();
    (g.value(y).clone(), w.len())
}

fn ln_vec(x: &[f64]) -> Vec<f64> {
    let d = x.len();
    ln_rows(&vec![x.to_vec()], &Tensor::ones(&[d]), &Tensor::zeros(&[d])).remove(0)
}

#[test]
fn single_encoder_stack_is_one_block() {
    let mut r = rng(9);
    let e = random_encoder(&mut r, 8, 2);
    let z0 = random_tensor(&mut r, &[5, 8], 1.0);
    let (y, heads) = stack_output(std::slice::from_ref(&e), Some(vec![Tensor::eye(8)]), &z0);
    assert_eq!(heads, 2);
    let expect = ln_vec(&oracle_encoder(&mat(&z0), &e)[0]);
    for (a, b) in y.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn dense_stack_concatenates_predecessors() {
    // Encoder 3 reads [z0; out1; out2] through a [3D, D] transition.
    let mut r = rng(10);
    let d = 4;
    let encs: Vec<EncRaw> = (0..3).map(|_| random_encoder(&mut r, d, 2)).collect();
    let ts: Vec<Tensor> = (1..=3).map(|l| random_tensor(&mut r, &[l * d, d], 0.6)).collect();
    let z0 = random_tensor(&mut r, &[3, d], 1.0);
    let (y, _) = stack_output(&encs, Some(ts.clone()), &z0);

    let mut outs = vec![mat(&z0)];
    for (l, e) in encs.iter().enumerate() {
        let cat: Mat = (0..3).map(|row| outs.iter().flat_map(|o| o[row].clone()).collect()).collect();
        assert_eq!(cat[0].len(), (l + 1) * d);
        outs.push(oracle_encoder(&mm(&cat, &mat(&ts[l])), e));
    }
    let expect = ln_vec(&outs[3][0]);
    for (a, b) in y.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn zero_sublayer_stack_returns_normalized_class_row() {
    let mut r = rng(11);
    let d = 8;
    let z0 = random_tensor(&mut r, &[5, d], 1.0);
    let expect = ln_vec(z0.row(0));
    for conn in [Some(vec![Tensor::eye(d), select_last(d, 2)]), None] {
        let encs = vec![zero_sublayers(d, 4), zero_sublayers(d, 4)];
        let (y, _) = stack_output(&encs, conn, &z0);
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

fn select_last(d: usize, blocks: usize) -> Tensor {
    let mut t = Tensor::zeros(&[blocks * d, d]);
    for i in 0..d {
        t.data_mut()[((blocks - 1) * d + i) * d + i] = 1.0;
    }
    t
}

// ---- head ---------------------------------------------------------------------------

#[test]
fn head_examples() {
    let mut g = Graph::new();
    let mut p = |s: &[usize]| g.param(Tensor::zeros(s));
    let h = HeadVars { w1: p(&[8, 4]), b1: p(&[4]), w2: p(&[4, 13]), b2: p(&[13]) };
    let y = g.constant(Tensor::vector(vec![1.0; 8]));
    let s = classify_head(&mut g, y, &h).unwrap();
    assert_eq!(g.value(s).data(), &[0.5; 13]);

    // D = 2, hidden 1, δ = 1: y = (1, -2), W1 = (0.5, -0.25), b1 = 0.1 -> relu(1.1) = 1.1;
    // W2 = 2, b2 = -1 -> sigmoid(1.2)
    let mut g = Graph::new();
    let h = HeadVars {
        w1: g.param(Tensor::new(vec![2, 1], vec![0.5, -0.25]).unwrap()),
        b1: g.param(Tensor::vector(vec![0.1])),
        w2: g.param(Tensor::new(vec![1, 1], vec![2.0]).unwrap()),
        b2: g.param(Tensor::vector(vec![-1.0])),
    };
    let y = g.constant(Tensor::vector(vec![1.0, -2.0]));
    let s = classify_head(&mut g, y, &h).unwrap();
    assert!((g.value(s).data()[0] - 1.0 / (1.0 + (-1.2f64).exp())).abs() < 1e-12);
}

// ---- full model ---------------------------------------------------------------------

fn desk(arch: Architecture, seed: u64) -> PosterModel {
    let cfg = ModelConfig { arch, ..ModelConfig::desk(4) };
    PosterModel::new(cfg, vocab(4), seed).unwrap()
}

#[test]
fn forward_is_deterministic_and_in_range() {
    let (imgs, _) = synthetic(3, 4, 64, 5);
    for arch in Architecture::ALL {
        let m = desk(arch, 1);
        let a = m.predict(&imgs, 2).unwrap();
        let b = m.predict(&imgs, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flatten().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(a[0].len(), 4);
    }
}

#[test]
fn golden_scores() {
    let (imgs, _) = synthetic(2, 4, 64, 99);
    let scores = desk(Architecture::RDT, 12345).predict(&imgs, 2).unwrap();
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/desk_rdt_scores.txt");
    if std::env::var_os("RDT_REGEN_GOLDEN").is_some() {
        let text: String = scores.iter().map(|r| format!("{}\n", r.iter().map(f64::to_string).collect::<Vec<_>>().join(" "))).collect();
        std::fs::write(&path, text).unwrap();
    }
    let golden: Vec<Vec<f64>> = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(|l| l.split(' ').map(|v| v.parse().unwrap()).collect())
        .collect();
    for (a, b) in scores.iter().flatten().zip(golden.iter().flatten()) {
        assert!((a - b).abs() < 1e-12, "{a} vs golden {b}");
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let (imgs, _) = synthetic(2, 4, 64, 8);
    let m = desk(Architecture::RDT, 3);
    let mut g = Graph::new();
    let f = m.forward(&mut g, &imgs).unwrap();
    assert_eq!(f.attention.len(), 2 * 4);
    for &a in &f.attention {
        assert_eq!(g.shape(a), &[2, 17, 17]);
        for row in g.value(a).rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

fn loss_of(m: &PosterModel, imgs: &[Tensor], labels: &[rdt_core::data::MultiHotLabel]) -> f64 {
    let mut g = Graph::new();
    let f = m.forward(&mut g, imgs).unwrap();
    let l = asl_graph(&mut g, f.scores, labels, &AslConfig::default()).unwrap();
    g.value(l).data()[0]
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let (imgs, labels) = synthetic(2, 4, 64, 21);
    let mut r = rng(22);
    let m = desk(Architecture::RDT, 4);
    let mut g = Graph::new();
    let f = m.forward(&mut g, &imgs).unwrap();
    let loss: Var = asl_graph(&mut g, f.scores, &labels, &AslConfig::default()).unwrap();
    g.backward(loss).unwrap();
    for _ in 0..5 {
        let pi = r.gen_range(0..m.params.len());
        let ei = r.gen_range(0..m.params.value(pi).numel());
        let auto = g.grad(f.bound.vars()[pi]).unwrap()[ei];
        let mut plus = m.clone();
        plus.params.value_mut(pi).data_mut()[ei] += 1e-4;
        let mut minus = m.clone();
        minus.params.value_mut(pi).data_mut()[ei] -= 1e-4;
        let fd = (loss_of(&plus, &imgs, &labels) - loss_of(&minus, &imgs, &labels)) / 2e-4;
        let tol = f64::max(1e-5, 1e-3 * fd.abs());
        assert!((auto - fd).abs() <= tol, "{}[{ei}]: {auto} vs {fd}", m.params.names()[pi]);
    }
}

#[test]
fn gradient_reaches_front_end() {
    let (imgs, labels) = synthetic(2, 4, 64, 31);
    let m = desk(Architecture::RDT, 5);
    let mut g = Graph::new();
    let f = m.forward(&mut g, &imgs).unwrap();
    let loss = asl_graph(&mut g, f.scores, &labels, &AslConfig::default()).unwrap();
    g.backward(loss).unwrap();
    for name in ["extractor.conv0.w", "extractor.conv1.w", "embed.E", "embed.pos", "embed.class"] {
        let v = f.bound.var(name);
        assert!(g.grad(v).unwrap().iter().any(|&x| x != 0.0), "{name} got no gradient");
    }

    let mut frozen = m.clone();
    frozen.config.freeze_extractor = true;
    let mut g = Graph::new();
    let f = frozen.forward(&mut g, &imgs).unwrap();
    assert!(!g.requires_grad(f.bound.var("extractor.conv0.w")));
    assert!(g.requires_grad(f.bound.var("embed.E")));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (imgs, _) = synthetic(2, 4, 64, 41);
    for arch in Architecture::ALL {
        let m = desk(arch, 6);
        let path = dir.path().join(format!("{arch}.ckpt"));
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.vocab, m.vocab);
        assert_eq!(back.predict(&imgs, 2).unwrap(), m.predict(&imgs, 2).unwrap());
    }
    std::fs::write(dir.path().join("bad.ckpt"), b"nope").unwrap();
    assert!(load_checkpoint(&dir.path().join("bad.ckpt")).is_err());
}
