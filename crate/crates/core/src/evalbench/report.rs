use super::ScoreMap;
use crate::mask::Mask;

pub const TP_COLOR: [f64; 3] = [1.0, 0.9, 0.0];
pub const FP_COLOR: [f64; 3] = [0.9, 0.1, 0.1];
pub const FN_COLOR: [f64; 3] = [0.1, 0.8, 0.2];

const OVERLAY_ALPHA: f64 = 0.6;

/// Blends TP/FP/FN colors over `base`; true negatives keep the base color.
pub fn overlay_tp_fp_fn(base: &[[f64; 3]], pred: &Mask, gt: &Mask) -> Vec<[f64; 3]> {
    base.iter()
        .enumerate()
        .map(|(p, c)| {
            let tint = match (pred.get_index(p), gt.get_index(p)) {
                (true, true) => TP_COLOR,
                (true, false) => FP_COLOR,
                (false, true) => FN_COLOR,
                (false, false) => return *c,
            };
            std::array::from_fn(|k| (1.0 - OVERLAY_ALPHA) * c[k] + OVERLAY_ALPHA * tint[k])
        })
        .collect()
}

/// Blue-to-red ramp for `v ∈ [0, 1]`.
pub fn heat_color(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [v, 1.0 - (2.0 * v - 1.0).abs(), 1.0 - v]
}

/// Score map rescaled from `[lo, hi]` onto the heat ramp.
pub fn score_map_image(map: &ScoreMap, lo: f64, hi: f64) -> Vec<[f64; 3]> {
    let span = (hi - lo).max(1e-12);
    map.scores.iter().map(|&s| heat_color((s - lo) / span)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_colors_follow_the_confusion_class() {
        let base = vec![[0.0; 3]; 4];
        let pred = Mask::from_fn(4, 1, |x, _| x < 2);
        let gt = Mask::from_fn(4, 1, |x, _| x % 2 == 0);
        let o = overlay_tp_fp_fn(&base, &pred, &gt);
        assert_eq!(o[0], TP_COLOR.map(|v| v * OVERLAY_ALPHA));
        assert_eq!(o[1], FP_COLOR.map(|v| v * OVERLAY_ALPHA));
        assert_eq!(o[2], FN_COLOR.map(|v| v * OVERLAY_ALPHA));
        assert_eq!(o[3], [0.0; 3]);
    }
}
