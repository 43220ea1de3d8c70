mod common;

use bridge_pet::tensor::{Graph, Tensor};
use common::grad::{all_checks, TRIALS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_and_goodness_matches_central_differences() {
    let checks = all_checks();
    assert!(checks.len() >= 25);
    for c in &checks {
        assert!(c.passed(), "{}: worst relative error {:e} over {} trials (tol {:e})", c.name, c.worst, c.trials, c.tol);
    }
}

#[test]
fn shared_subexpressions_match_the_tree() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..TRIALS {
        let x0 = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let w0 = Tensor::randn(&[3, 3], 1.0, &mut rng);

        // dag: s = x@w used three times
        let mut g = Graph::new();
        let (x, w) = (g.param(x0.clone()), g.param(w0.clone()));
        let s = g.matmul(x, w).unwrap();
        let a = g.mul(s, s).unwrap();
        let b = g.add(a, s).unwrap();
        let root = g.sum(b);
        let dag = g.backward(root).unwrap();

        // tree: three separate copies of x@w
        let mut t = Graph::new();
        let (tx, tw) = (t.param(x0), t.param(w0));
        let s1 = t.matmul(tx, tw).unwrap();
        let s2 = t.matmul(tx, tw).unwrap();
        let s3 = t.matmul(tx, tw).unwrap();
        let a = t.mul(s1, s2).unwrap();
        let b = t.add(a, s3).unwrap();
        let root = t.sum(b);
        let tree = t.backward(root).unwrap();

        for (d, tr) in [(x, tx), (w, tw)] {
            for (p, q) in dag.get(d).unwrap().data().iter().zip(tree.get(tr).unwrap().data()) {
                assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()), "{p} vs {q}");
            }
        }
    }
}
