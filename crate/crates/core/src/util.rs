//! Small shared helpers: deterministic seed derivation and float formatting.

/// SplitMix64 step; used to derive independent child seeds from a root seed.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for stream `stream` of root `seed`. Streams are decorrelated
/// so parallel workers can be seeded independently of scheduling order.
pub fn child_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03))
}

/// Format a float with 17 significant digits so text output round-trips to
/// the identical f64 bit pattern.
pub fn fmt_g17(x: f64) -> String {
    if x == 0.0 {
        // normalize -0.0 so rerun outputs are byte-identical
        return "0.0000000000000000e0".to_string();
    }
    format!("{:.16e}", x)
}
