//! One-step transport along a line of pipes with plug flow.
//!
//! Speeds are normalized: `S = F·Δt/V` is the fraction of a pipe's volume
//! replaced during one time step. For a line `1, 2, …, n` the water that sits
//! in pipe 1 at the start of a step occupies, at the end of the step, the
//! stretch between the position of its trailing edge (the particle that was at
//! the inlet of pipe 1) and its leading edge (the particle that was at the
//! outlet). The trailing edge stops in pipe `n₁` at fraction `α`, the leading
//! edge in pipe `n₂` at fraction `β`:
//!
//! ```text
//! Σ_{k=1}^{n₁−1} 1/S_k + α/S_{n₁} = 1,      Σ_{k=2}^{n₂−1} 1/S_k + β/S_{n₂} = 1
//! ```

use super::PriorError;

/// Relative slack used when deciding on which side of a pipe boundary an
/// edge stops. Keeps exact boundaries (e.g. `S = 1`) from flipping on
/// round-off.
const BOUNDARY_EPS: f64 = 1e-12;

/// `S = F·Δt/V`.
pub fn normalized_speed(flow_lps: f64, dt_s: f64, volume_l: f64) -> Result<f64, PriorError> {
    if !(volume_l > 0.0 && volume_l.is_finite()) {
        return Err(PriorError::InvalidVolume(volume_l));
    }
    if !(flow_lps >= 0.0 && flow_lps.is_finite()) {
        return Err(PriorError::InvalidFlow(flow_lps));
    }
    if !(dt_s > 0.0 && dt_s.is_finite()) {
        return Err(PriorError::InvalidTimeStep(dt_s));
    }
    Ok(flow_lps * dt_s / volume_l)
}

/// Where the trailing and leading edges of pipe 1's water end up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSplit {
    /// 0-based position of the pipe holding the trailing edge.
    pub n1: usize,
    pub alpha: f64,
    /// 0-based position of the pipe holding the leading edge.
    pub n2: usize,
    pub beta: f64,
}

/// Finds the first position `m ≥ start` at which the running sum of
/// reciprocal speeds (from `start`) exceeds one, together with the fraction
/// of pipe `m` the edge travels into. A `None` reciprocal marks the
/// unbounded sink.
fn edge_stop(recip: &[Option<f64>], start: usize) -> Option<(usize, f64)> {
    let mut acc = 0.0;
    for (m, r) in recip.iter().enumerate().skip(start) {
        match r {
            None => return Some((m, 0.0)),
            Some(r) => {
                if acc + r > 1.0 + BOUNDARY_EPS * (1.0 + acc) {
                    let frac = ((1.0 - acc) / r).clamp(0.0, 1.0);
                    // frac < 1 except at round-off; pin into [0, 1)
                    return Some((m, if frac >= 1.0 { 1.0 - f64::EPSILON } else { frac }));
                }
                acc += r;
            }
        }
    }
    None
}

/// Remaining reciprocal budget `1 − Σ_{k=start}^{m−1} 1/S_k`.
fn budget_before(recip: &[Option<f64>], start: usize, m: usize) -> f64 {
    let used: f64 = recip[start..m].iter().map(|r| r.expect("finite before stop")).sum();
    (1.0 - used).max(0.0)
}

fn split_and_row(speeds: &[f64], sink: bool) -> Result<(Option<LineSplit>, Vec<f64>), PriorError> {
    let len = speeds.len() + usize::from(sink);
    if speeds.is_empty() {
        return Err(PriorError::HypothesisViolated("empty line".into()));
    }
    if let Some(s) = speeds.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(PriorError::InvalidSpeed(*s));
    }
    let s1 = speeds[0];
    let mut row = vec![0.0; len];
    if s1 == 0.0 {
        row[0] = 1.0;
        return Ok((None, row));
    }
    let mut recip: Vec<Option<f64>> = speeds.iter().map(|s| Some(1.0 / s)).collect();
    if sink {
        recip.push(None);
    }

    let (n2, beta) = edge_stop(&recip, 1).ok_or_else(|| {
        PriorError::HypothesisViolated(format!(
            "sum of 1/S over pipes 2..{} does not exceed 1",
            speeds.len()
        ))
    })?;
    let (n1, alpha) = edge_stop(&recip, 0).expect("trailing edge stops no later than leading edge");
    // Transit through a stagnant pipe is undefined for plug flow.
    if let Some(k) = (1..=n2.min(speeds.len() - 1)).find(|&k| speeds[k] == 0.0) {
        return Err(PriorError::HypothesisViolated(format!(
            "stagnant pipe at line position {k}"
        )));
    }

    let speed = |k: usize| speeds[k];
    if n1 == n2 {
        row[n1] = 1.0;
    } else {
        row[n1] = if recip[n1].is_none() {
            1.0
        } else {
            (1.0 - alpha) * s1 / speed(n1)
        };
        for (k, r) in row.iter_mut().enumerate().take(n2).skip(n1 + 1) {
            *r = s1 / speed(k);
        }
        row[n2] = if recip[n2].is_none() {
            // β·S₁/S_{n₂} in the limit of an unbounded last pipe
            s1 * budget_before(&recip, 1, n2)
        } else {
            beta * s1 / speed(n2)
        };
    }
    Ok((
        Some(LineSplit {
            n1,
            alpha,
            n2,
            beta,
        }),
        row,
    ))
}

/// Proportion of pipe 1's water found in each pipe of the line after one
/// step. Requires `Σ_{k≥2} 1/S_k > 1`, i.e. the leading edge must stay inside
/// the line; a stagnant first pipe returns `e₁`.
pub fn line_transitions(speeds: &[f64]) -> Result<Vec<f64>, PriorError> {
    split_and_row(speeds, false).map(|(_, row)| row)
}

/// Like [`line_transitions`] but the line drains into an unbounded sink
/// (the absorbing exit). The returned row has one extra trailing entry for
/// the sink.
pub fn line_transitions_to_sink(speeds: &[f64]) -> Result<Vec<f64>, PriorError> {
    split_and_row(speeds, true).map(|(_, row)| row)
}

/// The `(n₁, α, n₂, β)` solution for a line; `None` for a stagnant source.
pub fn line_split(speeds: &[f64]) -> Result<Option<LineSplit>, PriorError> {
    split_and_row(speeds, false).map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn speed_examples() {
        assert_eq!(normalized_speed(1.5, 1.0, 2.0).unwrap(), 0.75);
        assert_eq!(normalized_speed(0.0, 1.0, 2.0).unwrap(), 0.0);
        assert_eq!(normalized_speed(3.0, 1.0, 1.5).unwrap(), 2.0);
        assert!(matches!(
            normalized_speed(1.0, 1.0, 0.0),
            Err(PriorError::InvalidVolume(_))
        ));
    }

    #[test]
    fn two_pipe_line_matches_hand_solution() {
        let split = line_split(&[0.75, 0.5]).unwrap().unwrap();
        assert_eq!((split.n1, split.n2), (0, 1));
        assert_relative_eq!(split.alpha, 0.75, epsilon = 1e-15);
        assert_relative_eq!(split.beta, 0.5, epsilon = 1e-15);
        let row = line_transitions(&[0.75, 0.5]).unwrap();
        assert_relative_eq!(row[0], 0.25, epsilon = 1e-15);
        assert_relative_eq!(row[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn stagnant_source_keeps_everything() {
        assert_eq!(line_transitions(&[0.0, 0.3]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn hypothesis_violation() {
        assert!(matches!(
            line_transitions(&[0.5, 2.0]),
            Err(PriorError::HypothesisViolated(_))
        ));
        // exactly one: the leading edge sits on the outlet, still not contained
        assert!(line_transitions(&[0.5, 1.0]).is_err());
        assert!(matches!(
            line_transitions(&[0.5, 0.0, 0.1]),
            Err(PriorError::HypothesisViolated(_))
        ));
    }

    #[test]
    fn unit_speed_shifts_one_pipe() {
        let row = line_transitions(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(row, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn both_edges_in_one_pipe() {
        // pipe 1 flushed (S=4) into a large pipe 3 after a tiny pipe 2
        let row = line_transitions(&[4.0, 8.0, 0.1]).unwrap();
        let split = line_split(&[4.0, 8.0, 0.1]).unwrap().unwrap();
        assert_eq!((split.n1, split.n2), (2, 2));
        assert_eq!(row, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn sink_takes_the_overflow() {
        let row = line_transitions_to_sink(&[0.75]).unwrap();
        assert_relative_eq!(row[0], 0.25, epsilon = 1e-15);
        assert_relative_eq!(row[1], 0.75, epsilon = 1e-15);
        assert_eq!(line_transitions_to_sink(&[1.0]).unwrap(), vec![0.0, 1.0]);
        // flushed through a short pipe straight into the sink
        assert_eq!(line_transitions_to_sink(&[3.0, 2.0]).unwrap(), vec![0.0, 0.0, 1.0]);
        // trailing edge stops 2/3 into pipe 2; the rest has left
        let row = line_transitions_to_sink(&[1.5, 2.0]).unwrap();
        assert_relative_eq!(row[1], 0.25, epsilon = 1e-14);
        assert_relative_eq!(row[2], 0.75, epsilon = 1e-14);
    }
}
