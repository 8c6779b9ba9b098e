//! Evaluation metrics: Dice similarity coefficient and symmetric average
//! surface distance, computed per 2D slice.

/// `2|P ∩ G| / (|P| + |G|)` for one label; 1.0 when both sets are empty.
pub fn dsc(pred: &[u8], gt: &[u8], label: u8) -> f64 {
    assert_eq!(pred.len(), gt.len(), "mask lengths differ");
    let mut inter = 0usize;
    let mut p_count = 0usize;
    let mut g_count = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        let pi = p == label;
        let gi = g == label;
        if pi {
            p_count += 1;
        }
        if gi {
            g_count += 1;
        }
        if pi && gi {
            inter += 1;
        }
    }
    if p_count + g_count == 0 {
        return 1.0;
    }
    2.0 * inter as f64 / (p_count + g_count) as f64
}

/// Boundary pixels of a label region: foreground pixels 4-adjacent to
/// background or to the image border.
pub fn boundary_pixels(mask: &[u8], h: usize, w: usize, label: u8) -> Vec<(usize, usize)> {
    assert_eq!(mask.len(), h * w);
    let at = |r: usize, c: usize| mask[r * w + c] == label;
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !at(r, c) {
                continue;
            }
            let on_border = r == 0 || c == 0 || r == h - 1 || c == w - 1;
            let touches_bg = (r > 0 && !at(r - 1, c))
                || (r + 1 < h && !at(r + 1, c))
                || (c > 0 && !at(r, c - 1))
                || (c + 1 < w && !at(r, c + 1));
            if on_border || touches_bg {
                out.push((r, c));
            }
        }
    }
    out
}

fn directed_mean(from: &[(usize, usize)], to: &[(usize, usize)], spacing: (f64, f64)) -> f64 {
    let mut total = 0.0;
    for &(r, c) in from {
        let mut best = f64::INFINITY;
        for &(r2, c2) in to {
            let dy = (r as f64 - r2 as f64) * spacing.0;
            let dx = (c as f64 - c2 as f64) * spacing.1;
            let d = (dy * dy + dx * dx).sqrt();
            if d < best {
                best = d;
            }
        }
        total += best;
    }
    total / from.len() as f64
}

/// Symmetric average surface distance in physical units. Returns `None`
/// (undefined) when either mask has no pixels of the label.
pub fn asd(
    pred: &[u8],
    gt: &[u8],
    h: usize,
    w: usize,
    label: u8,
    spacing: (f64, f64),
) -> Option<f64> {
    let bp = boundary_pixels(pred, h, w, label);
    let bg = boundary_pixels(gt, h, w, label);
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    Some(0.5 * (directed_mean(&bp, &bg, spacing) + directed_mean(&bg, &bp, spacing)))
}
