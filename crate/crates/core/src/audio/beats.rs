/// Minimum spacing between two detected beats, in seconds.
pub const MIN_BEAT_GAP_S: f64 = 0.25;

/// Peak-picks an onset envelope: local maxima strictly above
/// `mean + 1 * stddev`, at least 0.25 s apart (stronger peaks win, ties go to
/// the earlier frame). Returns sorted frame indices.
pub fn detect_music_beats(onset_envelope: &[f64], frame_rate: f64) -> Vec<usize> {
    let n = onset_envelope.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = onset_envelope.iter().sum::<f64>() / n as f64;
    let var = onset_envelope.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let threshold = mean + var.sqrt();
    let x = onset_envelope;
    let mut candidates: Vec<usize> = (0..n)
        .filter(|&i| {
            x[i] > threshold && (i == 0 || x[i] > x[i - 1]) && (i + 1 == n || x[i] >= x[i + 1])
        })
        .collect();
    candidates.sort_by(|a, b| x[*b].total_cmp(&x[*a]).then(a.cmp(b)));
    let gap = (MIN_BEAT_GAP_S * frame_rate).ceil() as usize;
    let mut kept: Vec<usize> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| k.abs_diff(c) >= gap) {
            kept.push(c);
        }
    }
    kept.sort_unstable();
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_envelope_has_no_beats() {
        assert!(detect_music_beats(&[0.0; 300], 60.0).is_empty());
        assert!(detect_music_beats(&[], 60.0).is_empty());
    }

    #[test]
    fn impulse_train_at_two_hertz() {
        let mut env = vec![0.0; 240];
        for k in (0..240).step_by(30) {
            env[k] = 1.0;
        }
        let beats = detect_music_beats(&env, 60.0);
        assert_eq!(beats, (0..240).step_by(30).collect::<Vec<_>>());
    }

    #[test]
    fn single_impulse_is_one_beat() {
        let mut env = vec![0.0; 100];
        env[37] = 3.0;
        assert_eq!(detect_music_beats(&env, 60.0), vec![37]);
    }

    #[test]
    fn close_peaks_keep_the_stronger() {
        let mut env = vec![0.0; 100];
        env[40] = 1.0;
        env[45] = 2.0;
        env[80] = 1.5;
        assert_eq!(detect_music_beats(&env, 60.0), vec![45, 80]);
    }
}
