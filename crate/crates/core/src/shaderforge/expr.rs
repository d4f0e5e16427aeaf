use std::fmt;

/// Largest magnitude any node may produce. Keeps every tree finite.
const LIMIT: f32 = 1e6;
/// Denominators smaller than this trigger the protected fallback.
const TINY: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    pub fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Abs,
    Fract,
    Floor,
    Min,
    Max,
    Pow,
    Mix,
    Step,
    Length2,
    Mod,
    Noise,
}

impl Func {
    pub const ALL: [Func; 13] = [
        Func::Sin,
        Func::Cos,
        Func::Abs,
        Func::Fract,
        Func::Floor,
        Func::Min,
        Func::Max,
        Func::Pow,
        Func::Mix,
        Func::Step,
        Func::Length2,
        Func::Mod,
        Func::Noise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Abs => "abs",
            Func::Fract => "fract",
            Func::Floor => "floor",
            Func::Min => "min",
            Func::Max => "max",
            Func::Pow => "pow",
            Func::Mix => "mix",
            Func::Step => "step",
            Func::Length2 => "length2",
            Func::Mod => "mod",
            Func::Noise => "noise",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Sin | Func::Cos | Func::Abs | Func::Fract | Func::Floor => 1,
            Func::Min | Func::Max | Func::Pow | Func::Step | Func::Length2 | Func::Mod => 2,
            Func::Mix | Func::Noise => 3,
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Func::ALL.into_iter().find(|f| f.name() == name)
    }
}

/// Expression tree over pixel coordinates `u, v` and seed parameters `s0..s3`.
#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f32),
    U,
    V,
    Seed(u8),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

fn guard(x: f32) -> f32 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(-LIMIT, LIMIT)
    }
}

impl Expr {
    pub fn depth(&self) -> usize {
        match self {
            Expr::Num(_) | Expr::U | Expr::V | Expr::Seed(_) => 1,
            Expr::Neg(e) => 1 + e.depth(),
            Expr::Bin(_, a, b) => 1 + a.depth().max(b.depth()),
            Expr::Call(_, args) => 1 + args.iter().map(Expr::depth).max().unwrap_or(0),
        }
    }

    pub fn size(&self) -> usize {
        match self {
            Expr::Num(_) | Expr::U | Expr::V | Expr::Seed(_) => 1,
            Expr::Neg(e) => 1 + e.size(),
            Expr::Bin(_, a, b) => 1 + a.size() + b.size(),
            Expr::Call(_, args) => 1 + args.iter().map(Expr::size).sum::<usize>(),
        }
    }

    /// Whether the tree reads `u` or `v` anywhere.
    pub fn uses_coords(&self) -> bool {
        match self {
            Expr::U | Expr::V => true,
            Expr::Num(_) | Expr::Seed(_) => false,
            Expr::Neg(e) => e.uses_coords(),
            Expr::Bin(_, a, b) => a.uses_coords() || b.uses_coords(),
            Expr::Call(_, args) => args.iter().any(Expr::uses_coords),
        }
    }

    pub fn eval(&self, u: f32, v: f32, seeds: &[f32; 4]) -> f32 {
        let r = match self {
            Expr::Num(x) => *x,
            Expr::U => u,
            Expr::V => v,
            Expr::Seed(i) => seeds[*i as usize],
            Expr::Neg(e) => -e.eval(u, v, seeds),
            Expr::Bin(op, a, b) => {
                let a = a.eval(u, v, seeds);
                let b = b.eval(u, v, seeds);
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b.abs() < TINY {
                            a
                        } else {
                            a / b
                        }
                    }
                }
            }
            Expr::Call(f, args) => {
                let x = |i: usize| args[i].eval(u, v, seeds);
                match f {
                    Func::Sin => x(0).sin(),
                    Func::Cos => x(0).cos(),
                    Func::Abs => x(0).abs(),
                    Func::Fract => {
                        let a = x(0);
                        a - a.floor()
                    }
                    Func::Floor => x(0).floor(),
                    Func::Min => x(0).min(x(1)),
                    Func::Max => x(0).max(x(1)),
                    Func::Pow => {
                        let (a, b) = (x(0).abs(), x(1));
                        if a < TINY {
                            0.0
                        } else {
                            a.powf(b)
                        }
                    }
                    Func::Mix => {
                        let (a, b, t) = (x(0), x(1), x(2));
                        a * (1.0 - t) + b * t
                    }
                    Func::Step => {
                        if x(1) < x(0) {
                            0.0
                        } else {
                            1.0
                        }
                    }
                    Func::Length2 => x(0).hypot(x(1)),
                    Func::Mod => {
                        let (a, b) = (x(0), x(1));
                        if b.abs() < TINY {
                            0.0
                        } else {
                            a - b * (a / b).floor()
                        }
                    }
                    Func::Noise => value_noise(x(0), x(1), x(2)),
                }
            }
        };
        guard(r)
    }
}

fn hash2(x: i32, y: i32, octave: u32) -> f32 {
    let mut h = (x as u32).wrapping_mul(0x8da6_b343)
        ^ (y as u32).wrapping_mul(0xd816_3841)
        ^ octave.wrapping_mul(0xcb1a_b31f);
    h ^= h >> 13;
    h = h.wrapping_mul(0x5bd1_e995);
    h ^= h >> 15;
    (h & 0x00ff_ffff) as f32 / 0x0100_0000 as f32
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Fractal value noise in `[0,1)`; `octaves` is rounded and clamped to 1..=4.
pub fn value_noise(x: f32, y: f32, octaves: f32) -> f32 {
    let n = if octaves.is_finite() {
        octaves.round().clamp(1.0, 4.0) as u32
    } else {
        1
    };
    let (mut total, mut norm, mut amp, mut freq) = (0.0f32, 0.0f32, 1.0f32, 1.0f32);
    for o in 0..n {
        let (px, py) = ((x * freq).rem_euclid(4096.0), (y * freq).rem_euclid(4096.0));
        let (ix, iy) = (px.floor(), py.floor());
        let (fx, fy) = (smooth(px - ix), smooth(py - iy));
        let (ix, iy) = (ix as i32, iy as i32);
        let a = hash2(ix, iy, o);
        let b = hash2(ix + 1, iy, o);
        let c = hash2(ix, iy + 1, o);
        let d = hash2(ix + 1, iy + 1, o);
        let top = a + (b - a) * fx;
        let bottom = c + (d - c) * fx;
        total += amp * (top + (bottom - top) * fy);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    total / norm
}

/// Fully parenthesised source text that parses back to the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(x) => write!(f, "{x}"),
            Expr::U => f.write_str("u"),
            Expr::V => f.write_str("v"),
            Expr::Seed(i) => write!(f, "s{i}"),
            Expr::Neg(e) => write!(f, "-{e}"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// One expression per colour channel (or one shared by all three) plus seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct ShaderProgram {
    pub channels: Vec<Expr>,
    pub seeds: [f32; 4],
}

impl ShaderProgram {
    pub fn channel(&self, c: usize) -> &Expr {
        if self.channels.len() == 1 {
            &self.channels[0]
        } else {
            &self.channels[c]
        }
    }

    /// Raw (unsquashed) RGB value at normalised coordinates.
    pub fn eval_raw(&self, u: f32, v: f32) -> [f32; 3] {
        [0, 1, 2].map(|c| self.channel(c).eval(u, v, &self.seeds))
    }

    pub fn depth(&self) -> usize {
        self.channels.iter().map(Expr::depth).max().unwrap_or(0)
    }

    /// Channel sources joined by `"; "` (seeds are not part of the source).
    pub fn source(&self) -> String {
        self.channels
            .iter()
            .map(Expr::to_string)
            .collect::<Vec<_>>()
            .join("; ")
    }
}

impl fmt::Display for ShaderProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source())
    }
}
