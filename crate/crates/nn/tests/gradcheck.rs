use ndarray::Array2;
use procbert_nn::params::{normal, uniform};
use procbert_nn::{Graph, GruCell, Linear, LstmCell, ParamId, ParamMask, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Compare tape gradients with central differences for every entry of every parameter.
fn check<F>(store: &mut ParamStore, build: F)
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let ids: Vec<ParamId> = store.ids().collect();
    let mut g = Graph::new(ParamMask::only(&ids));
    let loss = build(&mut g, store);
    let grads = g.backward(loss, 1.0);

    let eval = |s: &ParamStore| {
        let mut g = Graph::inference();
        let l = build(&mut g, s);
        g.scalar(l)
    };
    let h = 1e-5;
    for id in ids {
        let (rows, cols) = store.get(id).dim();
        for r in 0..rows {
            for c in 0..cols {
                let orig = store.get(id)[[r, c]];
                store.get_mut(id)[[r, c]] = orig + h;
                let up = eval(store);
                store.get_mut(id)[[r, c]] = orig - h;
                let down = eval(store);
                store.get_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.get(id).map(|g| g[[r, c]]).unwrap_or(0.0);
                let denom = numeric.abs().max(analytic.abs()).max(1e-6);
                let rel = (numeric - analytic).abs() / denom;
                assert!(
                    rel < 1e-4,
                    "{}[{r},{c}]: analytic {analytic}, numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(11)
}

#[test]
fn elementwise_and_broadcast_ops() {
    let mut rng = rng();
    let mut store = ParamStore::new();
    let a = store.add("a", normal(3, 4, 1.0, &mut rng));
    let b = store.add("b", normal(3, 4, 1.0, &mut rng));
    let row = store.add("row", normal(1, 4, 1.0, &mut rng));
    let col = store.add("col", normal(3, 1, 1.0, &mut rng));
    check(&mut store, |g, s| {
        let a = g.param(s, a);
        let b = g.param(s, b);
        let row = g.param(s, row);
        let col = g.param(s, col);
        let x = g.mul(a, b);
        let x = g.add_row(x, row);
        let x = g.mul_col(x, col);
        let y = g.sub(x, a);
        let y = g.sigmoid(y);
        let z = g.tanh(b);
        let z = g.scale(z, 0.7);
        let w = g.add(y, z);
        let w = g.relu(w);
        g.sum_all(w)
    });
}

#[test]
fn matmul_and_reshaping_ops() {
    let mut rng = rng();
    let mut store = ParamStore::new();
    let a = store.add("a", normal(4, 3, 1.0, &mut rng));
    let b = store.add("b", normal(3, 5, 1.0, &mut rng));
    check(&mut store, |g, s| {
        let a = g.param(s, a);
        let b = g.param(s, b);
        let p = g.matmul(a, b);
        let left = g.slice_cols(p, 1, 3);
        let top = g.slice_rows(p, 0, 2);
        let t = g.transpose(top);
        let r = g.reshape(t, 2, 5);
        let r = g.reshape(r, 5, 2);
        let rows = g.concat_rows(&[left, left]);
        let cols = g.concat_cols(&[r, r]);
        let picked = g.gather_rows(rows, &[0, 3, 3, 7]);
        let l1 = g.tanh(picked);
        let l2 = g.sigmoid(cols);
        let s1 = g.sum_all(l1);
        let s2 = g.sum_all(l2);
        let total = g.add(s1, s2);
        g.scale(total, 0.5)
    });
}

#[test]
fn softmax_losses_and_scatter() {
    let mut rng = rng();
    let mut store = ParamStore::new();
    let x = store.add("x", normal(5, 3, 1.0, &mut rng));
    let scores = store.add("scores", normal(2, 4, 1.0, &mut rng));
    check(&mut store, |g, s| {
        let x = g.param(s, x);
        let ce = g.softmax_cross_entropy(x, &[0, 2, 1, 1, 0], &[1.0, 0.5, 0.0, 2.0, 1.0]);
        let targets = Array2::from_shape_fn((5, 3), |(r, c)| ((r + c) % 4) as f64 / 3.0);
        let weights = Array2::from_shape_fn((5, 3), |(r, _)| if r == 2 { 0.0 } else { 1.0 });
        let bce = g.bce_with_logits(x, &targets, &weights);
        let sc = g.param(s, scores);
        let mask = Array2::from_shape_vec((2, 4), vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let w = g.masked_softmax_rows(sc, &mask);
        let sq = g.mul(w, w);
        let sw = g.sum_all(sq);
        let placed = g.scatter_blocks(x, &[(0, 1), (1, 0), (1, 2), (2, 1), (0, 0)], 3, 3);
        let t = g.tanh(placed);
        let st = g.sum_all(t);
        let a = g.add(ce, bce);
        let b = g.add(sw, st);
        g.add(a, b)
    });
}

#[test]
fn recurrent_cells() {
    let mut rng = rng();
    let mut store = ParamStore::new();
    let lstm = LstmCell::new(&mut store, "lstm", 3, 2, &mut rng);
    let gru = GruCell::new(&mut store, "gru", 2, 3, &mut rng);
    let head = Linear::new(&mut store, "head", 3, 1, true, &mut rng);
    let inputs = uniform(6, 3, 1.0, &mut rng);
    check(&mut store, |g, s| {
        let cell = lstm.bind(g, s);
        let x = g.constant(inputs.clone());
        let proj = cell.project(g, x);
        let mut h = g.zeros(2, 2);
        let mut c = g.zeros(2, 2);
        let mut hg = g.zeros(2, 3);
        for t in 0..3 {
            let p = g.slice_rows(proj, 2 * t, 2);
            let (h2, c2) = cell.step(g, p, h, c);
            h = h2;
            c = c2;
            hg = gru.step(g, s, h, hg);
        }
        let out = head.forward(g, s, hg);
        let out = g.sigmoid(out);
        g.sum_all(out)
    });
}
