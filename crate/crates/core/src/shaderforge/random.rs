//! Random program synthesis by recursive grammar expansion.

use rand::Rng;

use super::expr::{BinOp, Expr, Func, ShaderProgram};

enum Production {
    Bin(BinOp),
    Call(Func),
}

const PRODUCTIONS: [(Production, f32); 17] = [
    (Production::Bin(BinOp::Add), 1.0),
    (Production::Bin(BinOp::Sub), 1.0),
    (Production::Bin(BinOp::Mul), 2.0),
    (Production::Bin(BinOp::Div), 0.4),
    (Production::Call(Func::Sin), 0.9),
    (Production::Call(Func::Cos), 0.9),
    (Production::Call(Func::Abs), 0.8),
    (Production::Call(Func::Fract), 1.4),
    (Production::Call(Func::Floor), 0.5),
    (Production::Call(Func::Min), 0.8),
    (Production::Call(Func::Max), 0.8),
    (Production::Call(Func::Pow), 0.3),
    (Production::Call(Func::Mix), 0.6),
    (Production::Call(Func::Step), 1.2),
    (Production::Call(Func::Length2), 1.3),
    (Production::Call(Func::Mod), 0.7),
    (Production::Call(Func::Noise), 0.4),
];

/// Probability that a node at `depth` (root = 1) is a terminal. Rises
/// linearly and reaches one at `max_depth`.
fn terminal_probability(depth: usize, max_depth: usize) -> f64 {
    if depth >= max_depth {
        1.0
    } else {
        (0.08 + 0.13 * (depth - 1) as f64).min(1.0)
    }
}

fn terminal<R: Rng + ?Sized>(rng: &mut R) -> Expr {
    let x: f64 = rng.gen();
    if x < 0.32 {
        Expr::U
    } else if x < 0.64 {
        Expr::V
    } else if x < 0.78 {
        Expr::Seed(rng.gen_range(0..4))
    } else {
        let lit: f32 = rng.gen_range(-6.0f32..6.0);
        Expr::Num((lit * 100.0).round() / 100.0)
    }
}

fn expand<R: Rng + ?Sized>(rng: &mut R, depth: usize, max_depth: usize) -> Expr {
    if rng.gen_bool(terminal_probability(depth, max_depth)) {
        return terminal(rng);
    }
    let total: f32 = PRODUCTIONS.iter().map(|(_, w)| w).sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut chosen = &PRODUCTIONS[0].0;
    for (p, w) in &PRODUCTIONS {
        if pick < *w {
            chosen = p;
            break;
        }
        pick -= w;
    }
    match chosen {
        Production::Bin(op) => {
            let a = expand(rng, depth + 1, max_depth);
            let b = expand(rng, depth + 1, max_depth);
            Expr::Bin(*op, Box::new(a), Box::new(b))
        }
        Production::Call(f) => {
            let args = (0..f.arity())
                .map(|_| expand(rng, depth + 1, max_depth))
                .collect();
            Expr::Call(*f, args)
        }
    }
}

/// Sample a program whose channel trees are at most `max_depth` deep.
pub fn random_program<R: Rng + ?Sized>(rng: &mut R, max_depth: usize) -> ShaderProgram {
    let max_depth = max_depth.max(1);
    let n = if rng.gen_bool(0.15) { 1 } else { 3 };
    let channels = (0..n).map(|_| expand(rng, 1, max_depth)).collect();
    let seeds = [0; 4].map(|_| rng.gen::<f32>());
    ShaderProgram { channels, seeds }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn depth_one_is_terminal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let p = random_program(&mut rng, 1);
            assert!(p.channels.iter().all(|c| c.depth() == 1));
        }
    }

    #[test]
    fn respects_depth_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            assert!(random_program(&mut rng, 12).depth() <= 12);
        }
    }

    #[test]
    fn same_seed_same_program() {
        let a = random_program(&mut ChaCha8Rng::seed_from_u64(77), 12);
        let b = random_program(&mut ChaCha8Rng::seed_from_u64(77), 12);
        assert_eq!(a, b);
    }

    #[test]
    fn survival_rate_regression() {
        use crate::shaderforge::{filter_image, render};
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let kept = (0..1000)
            .filter(|_| {
                let p = random_program(&mut rng, 12);
                filter_image(&render(&p, 32, 32)).unwrap().keep
            })
            .count();
        println!("survival {kept}/1000");
        assert!(kept >= 300, "survival {kept}/1000");
    }
}
