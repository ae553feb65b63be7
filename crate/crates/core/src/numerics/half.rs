use half::f16;

/// Rounds `v` to the nearest-even binary16 value and widens it back.
/// Magnitudes beyond the half range become signed infinity.
pub fn half_roundtrip(v: f32) -> f32 {
    f16::from_f32(v).to_f32()
}

pub fn f32_to_half_bits(v: f32) -> u16 {
    f16::from_f32(v).to_bits()
}

pub fn half_bits_to_f32(bits: u16) -> f32 {
    f16::from_bits(bits).to_f32()
}
