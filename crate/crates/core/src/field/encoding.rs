use crate::scalar::Real;

/// Fourier features of `v`, component-major: for each component, for each
/// frequency `j ∈ 0..levels`, the pair `(sin(2ʲπv), cos(2ʲπv))`.
pub fn positional_encoding<T: Real>(v: &[T], levels: usize) -> Vec<T> {
    let mut out = vec![T::zero(); 2 * levels * v.len()];
    write_encoding(v, levels, &mut out);
    out
}

/// The raw input followed by its positional encoding: `3 + 6L` values for a 3-vector.
pub fn encode_with_raw<T: Real>(v: &[T], levels: usize) -> Vec<T> {
    let mut out = v.to_vec();
    out.extend(positional_encoding(v, levels));
    out
}

pub(crate) fn write_encoding<T: Real>(v: &[T], levels: usize, out: &mut [T]) {
    let mut k = 0;
    for &x in v {
        if levels == 0 {
            continue;
        }
        // higher frequencies by the double-angle identities
        let (mut s, mut c) = (T::PI() * x).sin_cos();
        for _ in 0..levels {
            out[k] = s;
            out[k + 1] = c;
            k += 2;
            (s, c) = ((s + s) * c, (c - s) * (c + s));
        }
    }
}

/// Adds `Σ ∂enc/∂vᵢ · g` into `grad_v` for the encoding written by [`write_encoding`].
pub(crate) fn encoding_backward<T: Real>(v: &[T], levels: usize, enc: &[T], g: &[T], grad_v: &mut [T]) {
    let mut k = 0;
    for (i, _) in v.iter().enumerate() {
        let mut freq = T::PI();
        let mut acc = T::zero();
        for _ in 0..levels {
            // d sin = f cos, d cos = −f sin
            acc += freq * (g[k] * enc[k + 1] - g[k + 1] * enc[k]);
            k += 2;
            freq = freq + freq;
        }
        grad_v[i] += acc;
    }
}
