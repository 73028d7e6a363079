//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{Matrix4, Vector3};
use rand::Rng;
use servotrack::hog::HogParams;
use servotrack::kinematics::{DhChain, DhLink, HomogeneousTransform, JointConfig, JointKind};
use servotrack::renderer::Image;

/// Forward kinematics as a plain product of elementary 4x4 matrices:
/// `Rz(theta) Tz(d) Tx(a) Rx(alpha)` per link.
pub fn fk_matrix_oracle(chain: &DhChain, q: &[f64]) -> Matrix4<f64> {
    let mut m = chain.base().to_matrix();
    let mut qi = q.iter();
    for link in chain.links() {
        let theta = match link.joint_kind {
            JointKind::Revolute => qi.next().unwrap() + link.theta_offset,
            JointKind::Fixed => link.theta_offset,
        };
        let (s, c) = theta.sin_cos();
        #[rustfmt::skip]
        let rz = Matrix4::new(
            c, -s, 0.0, 0.0,
            s, c, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        );
        let mut tz = Matrix4::identity();
        tz[(2, 3)] = link.d;
        let mut tx = Matrix4::identity();
        tx[(0, 3)] = link.a;
        let (sa, ca) = link.alpha.sin_cos();
        #[rustfmt::skip]
        let rx = Matrix4::new(
            1.0, 0.0, 0.0, 0.0,
            0.0, ca, -sa, 0.0,
            0.0, sa, ca, 0.0,
            0.0, 0.0, 0.0, 1.0,
        );
        m = m * rz * tz * tx * rx;
    }
    m
}

pub fn random_chain(rng: &mut impl Rng, dof: usize) -> DhChain {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let mut base = HomogeneousTransform::from_axis_angle(&axis.normalize(), rng.random_range(-3.0..3.0));
    base.translation = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let mut links: Vec<DhLink> = (0..dof)
        .map(|_| {
            DhLink::revolute(
                rng.random_range(-0.5..0.5),
                rng.random_range(-3.1..3.1),
                rng.random_range(-0.3..0.3),
                rng.random_range(-3.1..3.1),
            )
        })
        .collect();
    links.push(DhLink::fixed(0.05, 0.3, 0.02, -0.4));
    DhChain::new(base, links).unwrap()
}

pub fn random_q(rng: &mut impl Rng, dof: usize) -> JointConfig {
    JointConfig((0..dof).map(|_| rng.random_range(-3.1..3.1)).collect())
}

/// Pixels on a 1/256 grid, so adding a multiple of 1/256 is exact in `f32`.
pub fn random_image(rng: &mut impl Rng, width: usize, height: usize) -> Image {
    Image::from_fn(width, height, |_, _| rng.random_range(0..200) as f32 / 256.0)
}

fn circular_distance(a: f64, b: f64, period: f64) -> f64 {
    let d = (a - b).rem_euclid(period);
    d.min(period - d)
}

/// Straightforward HOG: full-image gradients with the `[-1, 0, 1]` kernel,
/// each pixel weighting every bin by a triangular kernel around its centre,
/// then L2-Hys per block.
pub fn naive_hog(img: &Image, p: &HogParams) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let at = |x: usize, y: usize| img.get(x, y) as f64;
    let period = if p.signed {
        2.0 * std::f64::consts::PI
    } else {
        std::f64::consts::PI
    };
    let bw = period / p.n_bins as f64;
    let (cx, cy) = (w / p.cell_size, h / p.cell_size);
    let mut cells = vec![vec![vec![0.0; p.n_bins]; cx]; cy];
    for y in 0..cy * p.cell_size {
        for x in 0..cx * p.cell_size {
            let gx = at((x + 1).min(w - 1), y) - at(x.saturating_sub(1), y);
            let gy = at(x, (y + 1).min(h - 1)) - at(x, y.saturating_sub(1));
            let m = gx.hypot(gy);
            if m == 0.0 {
                continue;
            }
            let theta = gy.atan2(gx).rem_euclid(period);
            let cell = &mut cells[y / p.cell_size][x / p.cell_size];
            for (b, bin) in cell.iter_mut().enumerate() {
                let k = 1.0 - circular_distance(theta, b as f64 * bw, period) / bw;
                if k > 0.0 {
                    *bin += m * k;
                }
            }
        }
    }
    let mut out = Vec::new();
    let bx = (cx - p.block_size) / p.block_stride + 1;
    let by = (cy - p.block_size) / p.block_stride + 1;
    for j in 0..by {
        for i in 0..bx {
            let mut block = Vec::new();
            for dy in 0..p.block_size {
                for dx in 0..p.block_size {
                    block.extend_from_slice(&cells[j * p.block_stride + dy][i * p.block_stride + dx]);
                }
            }
            let eps2 = p.epsilon * p.epsilon;
            let n = (block.iter().map(|v| v * v).sum::<f64>() + eps2).sqrt();
            let clipped: Vec<f64> = block.iter().map(|v| (v / n).min(p.clip)).collect();
            let n2 = (clipped.iter().map(|v| v * v).sum::<f64>() + eps2).sqrt();
            out.extend(clipped.iter().map(|v| v / n2));
        }
    }
    out
}
