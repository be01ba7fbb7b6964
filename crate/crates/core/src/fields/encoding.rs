/// Sinusoidal encoding: for each input scalar, `[cos(2^l x), sin(2^l x)]`
/// for `l = 0..freqs`, grouped per scalar. Output length is `2 * freqs * values.len()`.
pub fn positional_encode(values: &[f64], freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len() * freqs * 2);
    encode_into(values, freqs, &mut out);
    out
}

/// Appends the encoding of `values` to `out`.
pub fn encode_into(values: &[f64], freqs: usize, out: &mut Vec<f64>) {
    for &x in values {
        let mut scale = 1.0;
        for _ in 0..freqs {
            let (s, c) = (scale * x).sin_cos();
            out.push(c);
            out.push(s);
            scale *= 2.0;
        }
    }
}
