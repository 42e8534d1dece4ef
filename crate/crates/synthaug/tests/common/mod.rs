//! Direct-computation oracles for the explicit transformer generator,
//! shared with the acceptance suite.
#![allow(dead_code)]

use rand::Rng;
use synthaug::dgp::{sample_seed_data, sample_world, BoundDomain, LatentWorld, WorldConfig};
use synthaug::rng::stream;
use synthaug::tfgen::{
    build_generator, build_select_block, default_omega, encode_tokens, append_token, phi_gate, positional,
    run_stack, run_stack_traced, Layout, Select, TokenMatrix,
};

pub const STEP_TOL: f64 = 1e-9;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// A world with `d <= 8`, `r <= 3`, at most 3 functions and depth at most 2.
pub fn small_world(seed: u64) -> LatentWorld {
    let mut rng = stream(seed, &[0x5A11]);
    let n_functions = rng.random_range(1..=3);
    let cfg = WorldConfig {
        d: rng.random_range(2..=8),
        r: rng.random_range(1..=3),
        n_subjects: rng.random_range(1..=n_functions),
        n_functions,
        l0: rng.random_range(1..=2),
        r0: rng.random_range(1..=4),
        eta: 0.5,
        bound: if rng.random::<bool>() { BoundDomain::Ball } else { BoundDomain::Tokens },
    };
    sample_world(&cfg, seed).expect("valid small world")
}

/// Token ids of the columns and whether each is an `X` column.
fn columns(pairs: &[(usize, usize)], extra: &[usize]) -> Vec<(usize, bool)> {
    let mut c: Vec<(usize, bool)> = pairs.iter().flat_map(|&(x, y)| [(x, true), (y, false)]).collect();
    for (i, &t) in extra.iter().enumerate() {
        c.push((t, i % 2 == 0));
    }
    c
}

/// Weights of a selection over `scores`, recomputed from the definition:
/// `v2_j = relu(1 - gap_j / omega)` with `gap_j` the summed shortfall to
/// the other scores, then stick-breaking in index order.
pub fn selection_weights(scores: &[f64], omega: f64, select: Select) -> Vec<f64> {
    let m = scores.len();
    let v2: Vec<f64> = (0..m)
        .map(|j| {
            let gap: f64 = (0..m)
                .filter(|&k| k != j)
                .map(|k| match select {
                    Select::Min => (scores[j] - scores[k]).max(0.0),
                    Select::Max => (scores[k] - scores[j]).max(0.0),
                })
                .sum();
            (1.0 - gap / omega).max(0.0)
        })
        .collect();
    let mut left = 1.0f64;
    v2.iter()
        .map(|&v| {
            let w = v.min(left.max(0.0));
            left -= v;
            w
        })
        .collect()
}

/// Check that `w` is a probability vector supported on the scores within
/// `omega` of the favoured end; with a gap of at least `omega` it must be
/// the indicator of the extremal index.
pub fn check_convex_selection(scores: &[f64], w: &[f64], omega: f64, select: Select) -> Result<(), String> {
    let best = match select {
        Select::Min => scores.iter().copied().fold(f64::INFINITY, f64::min),
        Select::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    let dist = |v: f64| (v - best).abs();
    if w.iter().any(|&x| x < -STEP_TOL) || (w.iter().sum::<f64>() - 1.0).abs() > STEP_TOL {
        return Err(format!("weights {w:?} are not a probability vector"));
    }
    for (j, &x) in w.iter().enumerate() {
        if x > STEP_TOL && dist(scores[j]) >= omega {
            return Err(format!("weight {x} on score {} farther than {omega} from {best}", scores[j]));
        }
    }
    let near: Vec<usize> = (0..scores.len()).filter(|&j| dist(scores[j]) < omega).collect();
    if near.len() == 1 && (w[near[0]] - 1.0).abs() > STEP_TOL {
        return Err(format!("isolated extremum {} got weight {}", near[0], w[near[0]]));
    }
    Ok(())
}

/// Run the generator on seed pairs plus `extra` generated tokens and compare
/// the state after each of the four steps with a direct computation.
pub fn check_generator(world: &LatentWorld, pairs: &[(usize, usize)], extra: &[usize]) -> Result<(), String> {
    let omega = default_omega(world.d, world.r);
    let stack = build_generator(world, omega).map_err(|e| e.to_string())?;
    let info = stack.generator.expect("generator info");
    let layout: Layout = info.layout;
    let mut h = encode_tokens(pairs, world).map_err(|e| e.to_string())?;
    for &t in extra {
        append_token(&mut h, t, world).map_err(|e| e.to_string())?;
    }
    let trace = run_stack_traced(&stack, &h).map_err(|e| e.to_string())?;
    let cols = columns(pairs, extra);
    let (r, m) = (layout.r, layout.m);
    let subject = |j: usize| world.subjects.get(j).cloned().unwrap_or_else(|| vec![0.0; r]);
    let u = |t: usize| world.u.row(t).to_vec();
    let blocks = |t: usize, is_x: bool| -> Vec<Vec<f64>> {
        (0..m)
            .map(|j| if is_x { world.functions[j].eval(world.u.row(t)) } else { subject(j) })
            .collect()
    };
    let expect = |step: usize, s: usize, coord: usize, got: f64, want: f64| -> Result<(), String> {
        if close(got, want, STEP_TOL) {
            Ok(())
        } else {
            Err(format!("step {step}, column {s}, coordinate {coord}: got {got}, want {want}"))
        }
    };
    let ends = info.step_ends();

    // Step 1: blocks hold f_j(u_X) or z_j; payload untouched.
    let h1 = &trace[ends[0] - 1];
    for (s, &(t, is_x)) in cols.iter().enumerate() {
        let b = blocks(t, is_x);
        for j in 0..m {
            for i in 0..r {
                expect(1, s, layout.block(j, i), h1.col(s)[layout.block(j, i)], b[j][i])?;
            }
        }
        for i in 0..r {
            expect(1, s, i, h1.col(s)[layout.payload(i)], u(t)[i])?;
        }
    }

    // Step 2: slots hold the inner product with the paired token.
    let partner = |s: usize| -> Option<usize> {
        let p = if s % 2 == 0 { s + 1 } else { s - 1 };
        (p < cols.len()).then_some(p)
    };
    let step2: Vec<Vec<f64>> = cols
        .iter()
        .enumerate()
        .map(|(s, &(t, is_x))| {
            let b = blocks(t, is_x);
            (0..m)
                .map(|j| partner(s).map_or(0.0, |p| dot(&b[j], &u(cols[p].0))))
                .collect()
        })
        .collect();
    let h2 = &trace[ends[1] - 1];
    for s in 0..cols.len() {
        for j in 0..m {
            expect(2, s, layout.slot(j), h2.col(s)[layout.slot(j)], step2[s][j])?;
        }
    }

    // Step 3: slots hold the sum over seed columns of the same kind.
    let n_seed = 2 * pairs.len();
    let h3 = &trace[ends[2] - 1];
    let mut scores = Vec::new();
    for (s, &(_, is_x)) in cols.iter().enumerate() {
        let sum: Vec<f64> = (0..m)
            .map(|j| (0..n_seed).filter(|&c| cols[c].1 == is_x).map(|c| step2[c][j]).sum())
            .collect();
        for j in 0..m {
            expect(3, s, layout.slot(j), h3.col(s)[layout.slot(j)], sum[j])?;
        }
        scores.push(sum);
    }

    // Step 4: payload is the selected convex combination of the blocks.
    let hw = &trace[info.weights_ready() - 1];
    let h4 = &trace[ends[3] - 1];
    for (s, &(t, is_x)) in cols.iter().enumerate() {
        let w: Vec<f64> = (0..m).map(|j| hw.col(s)[layout.slot(j)]).collect();
        let want_w = selection_weights(&scores[s], omega, Select::Max);
        for j in 0..m {
            expect(4, s, layout.slot(j), w[j], want_w[j])?;
        }
        check_convex_selection(&scores[s], &w, omega, Select::Max).map_err(|e| format!("column {s}: {e}"))?;
        let b = blocks(t, is_x);
        for i in 0..r {
            let want: f64 = (0..m).map(|j| w[j] * b[j][i]).sum();
            expect(4, s, i, h4.col(s)[layout.payload(i)], want)?;
        }
        for c in r..layout.dim() {
            expect(4, s, c, h4.col(s)[c], 0.0)?;
        }
    }
    Ok(())
}

/// One random world with random seeds and up to three generated tokens.
pub fn check_random_generator(seed: u64) -> Result<(), String> {
    let world = small_world(seed);
    let mut rng = stream(seed, &[0xC0]);
    let t = rng.random_range(0..world.n_subjects());
    let m = rng.random_range(0..world.n_functions());
    let n = rng.random_range(1..=6);
    let pairs = sample_seed_data(&world, t, m, n, &mut rng).map_err(|e| e.to_string())?;
    let k = rng.random_range(0..=3);
    let extra: Vec<usize> = (0..k).map(|_| rng.random_range(0..world.d)).collect();
    check_generator(&world, &pairs, &extra).map_err(|e| format!("world seed {seed}: {e}"))
}

/// The standalone min block against the argmin / convex-hull oracle.
pub fn check_random_min_block(seed: u64) -> Result<(), String> {
    let mut rng = stream(seed, &[0x313]);
    let m = rng.random_range(2..=4);
    let r = rng.random_range(1..=3);
    let omega = rng.random_range(0.05..2.0);
    let layout = Layout { r, m };
    let stack = build_select_block(omega, m, r, Select::Min).map_err(|e| e.to_string())?;
    let xs: Vec<Vec<f64>> = (0..m).map(|_| (0..r).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    let v: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut h = TokenMatrix::zeros(layout.dim(), 1, 1);
    {
        let col = h.col_mut(0);
        for j in 0..m {
            for i in 0..r {
                col[layout.block(j, i)] = xs[j][i];
            }
            col[layout.slot(j)] = v[j];
        }
        for (k, p) in positional(1, 1).into_iter().enumerate() {
            col[layout.pos(k)] = p;
        }
    }
    let trace = run_stack_traced(&stack, &h).map_err(|e| e.to_string())?;
    let w: Vec<f64> = (0..m).map(|j| trace[2].col(0)[layout.slot(j)]).collect();
    check_convex_selection(&v, &w, omega, Select::Min)?;
    let out = run_stack(&stack, &h).map_err(|e| e.to_string())?;
    let want_w = selection_weights(&v, omega, Select::Min);
    for i in 0..r {
        let want: f64 = (0..m).map(|j| want_w[j] * xs[j][i]).sum();
        if !close(out.col(0)[i], want, STEP_TOL) {
            return Err(format!("min block payload {i}: got {}, want {want}", out.col(0)[i]));
        }
    }
    if out.col(0)[r..].iter().any(|&c| c.abs() > STEP_TOL) {
        return Err("min block left scratch space non-zero".into());
    }
    // A clear winner must be returned exactly.
    let arg = (0..m).min_by(|&a, &b| v[a].total_cmp(&v[b])).expect("m >= 2");
    if (0..m).all(|j| j == arg || v[j] - v[arg] >= omega) {
        for i in 0..r {
            if !close(out.col(0)[i], xs[arg][i], STEP_TOL) {
                return Err(format!("isolated minimizer {arg} not returned"));
            }
        }
    }
    Ok(())
}

/// `phi_B(x; s, t) = x * 1{s = t}` for `|x| <= B`.
pub fn check_random_phi(seed: u64) -> Result<(), String> {
    let mut rng = stream(seed, &[0xF1]);
    let b: f64 = rng.random_range(0.1..100.0);
    let x = rng.random_range(-b..=b);
    let s: i64 = rng.random_range(-5..=5);
    let t: i64 = if rng.random::<bool>() { s } else { rng.random_range(-5..=5) };
    let got = phi_gate(x, s, t, b).map_err(|e| e.to_string())?;
    let want = if s == t { x } else { 0.0 };
    if (got - want).abs() > 1e-12 {
        return Err(format!("phi({x}; {s}, {t}, B={b}) = {got}, want {want}"));
    }
    Ok(())
}
