use super::expr::ShaderProgram;
use crate::gradcore::Tensor;
use crate::par;

/// Map any finite value into `[0,1]` with `0.5·(1 + sin(πx))`.
pub fn squash(x: f32) -> f32 {
    0.5 * (1.0 + (std::f32::consts::PI * x).sin())
}

/// Normalised coordinate of a pixel centre.
pub fn pixel_center(index: usize, extent: usize) -> f32 {
    (index as f32 + 0.5) / extent as f32
}

/// Render to a `[3,H,W]` image. Pixel `(r, c)` samples `u = (c+0.5)/W`,
/// `v = (r+0.5)/H`.
pub fn render(program: &ShaderProgram, h: usize, w: usize) -> Tensor {
    assert!(h >= 1 && w >= 1, "render needs a non-empty canvas");
    let rows: Vec<Vec<[f32; 3]>> = par::map_range(h, |r| {
        let v = pixel_center(r, h);
        (0..w)
            .map(|c| program.eval_raw(pixel_center(c, w), v).map(squash))
            .collect()
    });
    let mut data = vec![0.0f32; 3 * h * w];
    for (r, row) in rows.iter().enumerate() {
        for (c, px) in row.iter().enumerate() {
            for ch in 0..3 {
                data[(ch * h + r) * w + c] = px[ch];
            }
        }
    }
    Tensor::new(vec![3, h, w], data).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shaderforge::parse;

    #[test]
    fn constant_programs() {
        let img = render(&parse("0.0").unwrap(), 3, 4);
        assert!(img.data().iter().all(|&v| v == 0.5));
        let img = render(&parse("0.5").unwrap(), 2, 2);
        assert!(img.data().iter().all(|&v| v == squash(0.5)));
    }

    #[test]
    fn pixel_centres() {
        let p = parse("fract(4*u); fract(4*v); 0.0").unwrap();
        let raw = p.eval_raw(pixel_center(0, 8), pixel_center(0, 8));
        assert_eq!(raw[0], 0.25);
        let img = render(&p, 8, 8);
        assert_eq!(img.data()[0], squash(0.25));

        let p = parse("u").unwrap();
        assert_eq!(pixel_center(0, 2), 0.25);
        assert_eq!(pixel_center(1, 2), 0.75);
        let img = render(&p, 1, 2);
        assert_eq!(img.data()[..2], [squash(0.25), squash(0.75)]);
    }

    #[test]
    fn render_is_deterministic() {
        let p = parse("noise(u*9, v*7, 3) * sin(u*30); cos(v*20); mix(u, v, 0.3)").unwrap();
        assert_eq!(render(&p, 16, 16), render(&p, 16, 16));
    }
}
