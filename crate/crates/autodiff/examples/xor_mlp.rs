//! Two-layer GELU network on XOR: gradient check first, then AdamW until the
//! four points are classified.
use theia_autodiff::*;

fn main() -> Result<()> {
    let mut rng = Stream::new(7, 0);
    let mut ps = ParamStore::new();
    let mut add = |name: &str, shape: Vec<usize>| {
        let n = shape.iter().product();
        let v = (0..n).map(|_| 0.5 * rng.normal()).collect();
        ps.add(name, Tensor::new(shape, v).unwrap(), true).unwrap()
    };
    let (w1, b1) = (add("w1", vec![8, 2]), add("b1", vec![8]));
    let (w2, b2) = (add("w2", vec![2, 8]), add("b2", vec![2]));

    let mut g = GraphBuilder::new(&ps);
    let x = g.input("x", 2)?;
    let h = g.affine(x, w1, Some(b1))?;
    let h = g.gelu(h)?;
    let logits = g.affine(h, w2, Some(b2))?;
    let logits = g.name(logits, "logits")?;
    let y = g.index_input("y", 2)?;
    let loss = g.weighted_cross_entropy(logits, y, &[1.0, 1.0])?;
    let graph = g.finish();

    let feed = Feed::new()
        .real("x", vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0])
        .index("y", vec![0, 1, 1, 0]);

    let rep = grad_check(&graph, &ps, &feed, loss, &EvalOptions::eval(), 0, 1e-5)?;
    println!("gradient check: max relative error {:.2e}", rep.max_rel_err);

    let mut state = AdamWState::new(&ps);
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let steps = 400;
    for t in 0..steps {
        let tr = forward_eval(&graph, &ps, &feed, &EvalOptions::eval(), &mut Stream::new(0, 0))?;
        let back = tr.backward(&graph, &ps, loss)?;
        adamw_step(&mut ps, &back.grads, &mut state, cosine_lr(t, steps, 0.05, 0.0), &cfg)?;
        if t % 100 == 0 {
            println!("step {t:>3}  loss {:.4}", tr.scalar(loss));
        }
    }
    let tr = forward_eval(&graph, &ps, &feed, &EvalOptions::eval(), &mut Stream::new(0, 0))?;
    let out = tr.value(logits);
    for (i, row) in out.chunks(2).enumerate() {
        println!("x = {:?} -> class {}", &[i >> 1, i & 1], (row[1] > row[0]) as usize);
    }
    println!("final loss {:.5}", tr.scalar(loss));
    Ok(())
}
