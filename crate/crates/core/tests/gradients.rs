use medrek_autodiff::{Graph, Tensor, Var};
use medrek_core::editor::{EditorConfig, EditorModel};
use medrek_core::encoder::{EncoderConfig, Role};
use medrek_core::prompt_encoder::{AttentionMode, PromptEncoderConfig};
use medrek_core::vocab::Vocab;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn editor(shared_qk: bool, attention_mode: AttentionMode) -> EditorModel {
    let vocab = Vocab::build(["who wrote the book about red stars ?"]);
    let config = EditorConfig {
        encoder: EncoderConfig {
            d_enc: 5,
            d_rep: 6,
            prototype_tokens: 3,
            shared_qk,
        },
        prompt: PromptEncoderConfig {
            prompt_tokens: 3,
            d_lm: 8,
            heads: 2,
            attention_mode,
        },
    };
    EditorModel::new(config, vocab, 21).unwrap()
}

/// `<out, r>` for a fixed random `r`, so every output coordinate matters.
fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(Tensor::new(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
    let m = g.mul(out, r).unwrap();
    g.sum_all(m).unwrap()
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares analytic parameter gradients of `build` against central
/// differences for every coordinate; returns the worst relative error.
fn check_params(m: &mut EditorModel, build: impl Fn(&EditorModel, &mut Graph) -> Var) -> f64 {
    let mut g = Graph::new();
    let loss = build(m, &mut g);
    m.params.zero_grads();
    g.backward_into(loss, &mut m.params).unwrap();
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        let analytic = m.params.get(id).grad.clone().unwrap();
        for k in 0..analytic.len() {
            let orig = m.params.get(id).data()[k];
            let mut eval = |v: f64| {
                m.params.get_mut(id).data_mut()[k] = v;
                let mut g = Graph::new();
                let l = build(m, &mut g);
                g.value(l).data()[0]
            };
            let numeric = (eval(orig + H) - eval(orig - H)) / (2.0 * H);
            m.params.get_mut(id).data_mut()[k] = orig;
            let e = rel(analytic[k], numeric);
            assert!(e <= 1e-4, "{} [{k}]: analytic {} numeric {numeric}", m.params.name(id), analytic[k]);
            worst = worst.max(e);
        }
    }
    worst
}

#[test]
fn encoder_gradients_through_pooling() {
    for shared in [true, false] {
        let mut m = editor(shared, AttentionMode::Multihead);
        let worst = check_params(&mut m, |m, g| {
            let q = m.text_graph(g, "who wrote the book ?", Role::Query).unwrap();
            let k = m.text_graph(g, "red stars", Role::Key).unwrap();
            let v = m.text_graph(g, "about red stars book", Role::Value).unwrap();
            let p = m.prototype_graph(g).unwrap();
            let all = g.concat(&[q, k, v, p], 1).unwrap();
            project(g, all, 3)
        });
        assert!(worst <= 1e-4);
    }
}

#[test]
fn prompt_encoder_gradients_for_weights_and_input() {
    for mode in [AttentionMode::Multihead, AttentionMode::Linear] {
        let mut m = editor(true, mode);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z0: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let build = |m: &EditorModel, g: &mut Graph, z: &[f64]| -> (Var, Var) {
            let zv = g.variable(Tensor::new(&[6, 1], z.to_vec()).unwrap());
            let p = m.prompt_encoder.generate_graph(g, &m.params, zv).unwrap();
            assert_eq!(g.shape(p), [3, 8]);
            (zv, project(g, p, 5))
        };
        check_params(&mut m, |m, g| build(m, g, &z0).1);

        let mut g = Graph::new();
        let (zv, loss) = build(&m, &mut g, &z0);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(zv).unwrap().to_vec();
        for k in 0..z0.len() {
            let at = |d: f64| {
                let mut z = z0.clone();
                z[k] += d;
                let mut g = Graph::new();
                let (_, l) = build(&m, &mut g, &z);
                g.value(l).data()[0]
            };
            let numeric = (at(H) - at(-H)) / (2.0 * H);
            assert!(rel(analytic[k], numeric) <= 1e-4, "z_v[{k}]: {} vs {numeric}", analytic[k]);
        }
    }
}
