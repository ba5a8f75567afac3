use rand::Rng;

use crate::image::Image;

pub fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects `v` into `[reference − ε, reference + ε] ∩ [0, 1]`.
pub fn project(v: f32, reference: f32, epsilon: f32) -> f32 {
    v.clamp(reference - epsilon, reference + epsilon).clamp(0.0, 1.0)
}

/// One descent step `x − α·sign(∇)`, projected to the ε-ball around
/// `x_ref` and then to the pixel range.
pub fn pgd_step(x: &Image, x_ref: &Image, grad: &[f32], alpha: f32, epsilon: f32) -> Image {
    assert_eq!(x.len(), x_ref.len());
    assert_eq!(x.len(), grad.len());
    let data = x
        .data
        .iter()
        .zip(&x_ref.data)
        .zip(grad)
        .map(|((&v, &r), &g)| project(v - alpha * sign(g), r, epsilon))
        .collect();
    x.with_data(data)
}

/// `x + U(−ε, ε)` clamped to the pixel range.
pub fn uniform_start<R: Rng + ?Sized>(x: &Image, epsilon: f32, rng: &mut R) -> Image {
    if epsilon <= 0.0 {
        return x.clone();
    }
    let data = x
        .data
        .iter()
        .map(|&v| project(v + rng.gen_range(-epsilon..epsilon), v, epsilon))
        .collect();
    x.with_data(data)
}
