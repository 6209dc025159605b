use rand::Rng;

use super::AnnotatedClip;

/// Independently, with probability 0.5 each, reverses time and mirrors
/// horizontally. Clip and mask always receive the same transform.
pub fn augment<R: Rng + ?Sized>(item: &AnnotatedClip, rng: &mut R) -> AnnotatedClip {
    let reverse = rng.random_bool(0.5);
    let mirror = rng.random_bool(0.5);
    let mut out = item.clone();
    if reverse {
        out.clip = out.clip.reversed_time();
        out.mask = out.mask.map(|m| m.reversed_time());
    }
    if mirror {
        out.clip = out.clip.flipped_horizontal();
        out.mask = out.mask.map(|m| m.flipped_horizontal());
    }
    out
}
