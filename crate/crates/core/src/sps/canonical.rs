//! Mapping generated text onto a candidate label.

/// Returned when no candidate is close enough.
pub const UNMAPPED: &str = "UNMAPPED";
/// Largest accepted edit distance relative to the longer normalized string.
pub const MAX_DISTANCE_RATIO: f64 = 0.2;

/// Case-folded text with every non-alphanumeric character removed.
pub fn normalize_label(text: &str) -> String {
    text.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect()
}

/// Exact normalized match first, then the nearest candidate by edit distance
/// when within [`MAX_DISTANCE_RATIO`], otherwise [`UNMAPPED`]. Ties go to the
/// earlier candidate.
pub fn canonicalize_label(generated: &str, candidates: &[String]) -> String {
    let text = normalize_label(generated);
    if text.is_empty() {
        return UNMAPPED.to_string();
    }
    let normalized: Vec<String> = candidates.iter().map(|c| normalize_label(c)).collect();
    if let Some(i) = normalized.iter().position(|c| *c == text) {
        return candidates[i].clone();
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in normalized.iter().enumerate() {
        let longest = c.chars().count().max(text.chars().count());
        if longest == 0 {
            continue;
        }
        let ratio = strsim::levenshtein(c, &text) as f64 / longest as f64;
        if ratio <= MAX_DISTANCE_RATIO && best.is_none_or(|(_, r)| ratio < r) {
            best = Some((i, ratio));
        }
    }
    best.map_or_else(|| UNMAPPED.to_string(), |(i, _)| candidates[i].clone())
}
