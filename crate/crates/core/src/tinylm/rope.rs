//! Rotary position embeddings, half-rotation layout.
//!
//! Coordinate `i` in the first half is paired with `i + d/2`; both share the
//! frequency `theta_i = base^(-2i/d)`. Angles are formed in f64 so large
//! positions keep full f32 accuracy after the rotation.

/// `base^(-2i/d)` for `i in 0..d/2`.
pub fn inv_frequencies(head_dim: usize, base: f64) -> Vec<f64> {
    let half = head_dim / 2;
    (0..half)
        .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
        .collect()
}

/// `cos(p*theta)`/`sin(p*theta)` laid out over all `d` coordinates.
pub fn cos_sin(position: i64, head_dim: usize, base: f64) -> (Vec<f32>, Vec<f32>) {
    let half = head_dim / 2;
    let mut cos = vec![0.0f32; head_dim];
    let mut sin = vec![0.0f32; head_dim];
    for (i, theta) in inv_frequencies(head_dim, base).into_iter().enumerate() {
        let angle = position as f64 * theta;
        let (s, c) = angle.sin_cos();
        cos[i] = c as f32;
        cos[i + half] = c as f32;
        sin[i] = s as f32;
        sin[i + half] = s as f32;
    }
    (cos, sin)
}

/// `[x1, x2] -> [-x2, x1]` with `x1`, `x2` the two halves.
pub fn rotate_half(x: &[f32]) -> Vec<f32> {
    let half = x.len() / 2;
    let mut out = Vec::with_capacity(x.len());
    out.extend(x[half..].iter().map(|v| -v));
    out.extend_from_slice(&x[..half]);
    out
}

/// `x * cos + rotate_half(x) * sin`, in place.
pub fn rotate_with(x: &mut [f32], cos: &[f32], sin: &[f32]) {
    let half = x.len() / 2;
    for i in 0..half {
        let a = x[i];
        let b = x[i + half];
        x[i] = a * cos[i] - b * sin[i];
        x[i + half] = b * cos[i + half] + a * sin[i + half];
    }
}

/// Rotate `x` to position `position`.
pub fn apply_rope(x: &[f32], position: usize, base: f64) -> Vec<f32> {
    debug_assert!(x.len().is_multiple_of(2), "head_dim must be even");
    let (cos, sin) = cos_sin(position as i64, x.len(), base);
    let mut out = x.to_vec();
    rotate_with(&mut out, &cos, &sin);
    out
}
