use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    MoreAtBottom,
    Uniform,
    FewerAtBottom,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [ScheduleKind::MoreAtBottom, ScheduleKind::Uniform, ScheduleKind::FewerAtBottom];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::MoreAtBottom => "more-at-bottom",
            ScheduleKind::Uniform => "uniform",
            ScheduleKind::FewerAtBottom => "fewer-at-bottom",
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Steps-per-layer profile. Layer `l` (0-based from the bottom) gets weight
/// `decay^l` for more-at-bottom and the mirror image for fewer-at-bottom.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleShape {
    pub kind: ScheduleKind,
    pub decay: f64,
}

impl Default for ScheduleShape {
    fn default() -> Self {
        Self { kind: ScheduleKind::Uniform, decay: 0.5 }
    }
}

/// Largest-remainder split of `total` proportional to `weights`; lower
/// indices win ties.
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let short = total - out.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        out[i] += 1;
    }
    out
}

/// Splits `total_steps` over `layers` layers following `shape`.
///
/// The result is positive everywhere and sums to `total_steps`.
pub fn build_schedule(shape: ScheduleShape, layers: usize, total_steps: usize) -> Result<Vec<usize>> {
    if layers == 0 {
        return Err(Error::Config("schedule needs at least one layer".into()));
    }
    if total_steps < layers {
        return Err(Error::Config(format!("total_steps {total_steps} is fewer than the {layers} layers to schedule")));
    }
    if !(shape.decay > 0.0 && shape.decay <= 1.0) {
        return Err(Error::Config(format!("schedule decay {} must lie in (0, 1]", shape.decay)));
    }
    let decay = if shape.kind == ScheduleKind::Uniform { 1.0 } else { shape.decay };
    let weights: Vec<f64> = (0..layers).map(|l| decay.powi(l as i32)).collect();
    let mut steps = apportion(&weights, total_steps);
    if steps.contains(&0) {
        // Too few steps for a steep profile: one step each, the rest by weight.
        steps = apportion(&weights, total_steps - layers).into_iter().map(|s| s + 1).collect();
    }
    if shape.kind == ScheduleKind::FewerAtBottom {
        steps.reverse();
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(kind: ScheduleKind, decay: f64) -> ScheduleShape {
        ScheduleShape { kind, decay }
    }

    #[test]
    fn worked_examples() {
        assert_eq!(build_schedule(shape(ScheduleKind::Uniform, 0.5), 4, 100).unwrap(), vec![25; 4]);
        assert_eq!(build_schedule(shape(ScheduleKind::MoreAtBottom, 0.5), 3, 70).unwrap(), vec![40, 20, 10]);
        assert_eq!(build_schedule(shape(ScheduleKind::FewerAtBottom, 0.5), 3, 70).unwrap(), vec![10, 20, 40]);
        assert_eq!(build_schedule(shape(ScheduleKind::Uniform, 0.5), 3, 10).unwrap(), vec![4, 3, 3]);
    }

    #[test]
    fn rejects_too_few_steps() {
        assert!(build_schedule(ScheduleShape::default(), 5, 4).is_err());
        assert!(build_schedule(shape(ScheduleKind::MoreAtBottom, 0.0), 2, 4).is_err());
    }

    #[test]
    fn starved_layers_get_one_step() {
        let s = build_schedule(shape(ScheduleKind::MoreAtBottom, 0.1), 6, 8).unwrap();
        assert_eq!(s.iter().sum::<usize>(), 8);
        assert!(s.iter().all(|&v| v >= 1));
        assert!(s.windows(2).all(|w| w[0] >= w[1]), "{s:?}");
    }
}
