use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper limit on grid size, so that decoded metadata cannot request
/// unbounded allocations.
pub const MAX_GRID_STEPS: usize = 1 << 22;

/// Backward-time discretization `0 = t_0 < t_1 < ... < t_N = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct TimeGrid {
    nodes: Vec<f64>,
    uniform: bool,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    horizon: f64,
    n_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nodes: Option<Vec<f64>>,
}

impl TryFrom<GridRepr> for TimeGrid {
    type Error = Error;

    fn try_from(r: GridRepr) -> Result<Self> {
        match r.nodes {
            None => TimeGrid::uniform(r.horizon, r.n_steps),
            Some(nodes) => {
                let grid = TimeGrid::from_nodes(nodes)?;
                if grid.n_steps() != r.n_steps || grid.horizon() != r.horizon {
                    return Err(Error::InvalidArgument(
                        "grid nodes disagree with horizon / n_steps".into(),
                    ));
                }
                Ok(grid)
            }
        }
    }
}

impl From<TimeGrid> for GridRepr {
    fn from(g: TimeGrid) -> Self {
        GridRepr {
            horizon: g.horizon(),
            n_steps: g.n_steps(),
            nodes: (!g.uniform).then_some(g.nodes),
        }
    }
}

fn check_steps(n_steps: usize) -> Result<()> {
    if n_steps == 0 || n_steps > MAX_GRID_STEPS {
        return Err(Error::InvalidArgument(format!(
            "step count must be in 1..={MAX_GRID_STEPS}, got {n_steps}"
        )));
    }
    Ok(())
}

impl TimeGrid {
    pub fn uniform(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::DegenerateHorizon);
        }
        check_steps(n_steps)?;
        let mut nodes: Vec<f64> = (0..=n_steps)
            .map(|i| horizon * i as f64 / n_steps as f64)
            .collect();
        nodes[n_steps] = horizon;
        Ok(Self {
            nodes,
            uniform: true,
        })
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::InvalidArgument("grid needs at least two nodes".into()));
        }
        check_steps(nodes.len() - 1)?;
        if nodes[0] != 0.0 {
            return Err(Error::InvalidArgument("grid must start at 0".into()));
        }
        if nodes.iter().any(|t| !t.is_finite()) || nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "grid nodes must be finite and strictly increasing".into(),
            ));
        }
        Ok(Self {
            nodes,
            uniform: false,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    pub fn n_steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `alpha(t) = e^{-t^2}`, the schedule of the VP model.
    VpQuadratic,
    /// `alpha(t) = cos^2(pi t / (2T))`.
    Cosine,
    /// Values at every grid node.
    Custom(Vec<f64>),
}

/// Smallest admissible alpha; the tail of every built-in schedule is clamped here.
pub const ALPHA_FLOOR: f64 = 1e-5;

/// Signal levels `alpha` at the grid nodes, `alpha_0 = 1`, non-increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    grid: TimeGrid,
    alphas: Vec<f64>,
}

impl AlphaSchedule {
    /// Validates `alphas` against `grid`. Flat stretches are admitted (they are
    /// identity steps of the sampler); use [`build_alpha_schedule`] with a custom
    /// table to demand strict decrease.
    pub fn new(grid: TimeGrid, alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() != grid.nodes().len() {
            return Err(Error::InvalidSchedule(format!(
                "{} alphas for {} grid nodes",
                alphas.len(),
                grid.nodes().len()
            )));
        }
        if alphas[0] != 1.0 {
            return Err(Error::InvalidSchedule(format!("alpha_0 = {}, expected 1", alphas[0])));
        }
        if alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::InvalidSchedule("alphas must lie in (0, 1]".into()));
        }
        if alphas.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidSchedule("alphas must be non-increasing".into()));
        }
        Ok(Self { grid, alphas })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }
}

pub fn build_alpha_schedule(kind: &ScheduleKind, grid: &TimeGrid) -> Result<AlphaSchedule> {
    let horizon = grid.horizon();
    let alphas = match kind {
        ScheduleKind::VpQuadratic => grid
            .nodes()
            .iter()
            .map(|t| (-t * t).exp().max(ALPHA_FLOOR))
            .collect(),
        ScheduleKind::Cosine => grid
            .nodes()
            .iter()
            .map(|t| {
                let c = (std::f64::consts::FRAC_PI_2 * t / horizon).cos();
                (c * c).max(ALPHA_FLOOR)
            })
            .collect(),
        ScheduleKind::Custom(table) => {
            if table.windows(2).any(|w| !(w[1] < w[0])) {
                return Err(Error::InvalidSchedule(
                    "custom table is not strictly decreasing".into(),
                ));
            }
            table.clone()
        }
    };
    let mut alphas: Vec<f64> = alphas;
    if !matches!(kind, ScheduleKind::Custom(_)) {
        alphas[0] = 1.0;
    }
    AlphaSchedule::new(grid.clone(), alphas)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid_hits_both_ends_exactly() {
        let g = TimeGrid::uniform(3.0, 7).unwrap();
        assert_eq!(g.nodes()[0], 0.0);
        assert_eq!(g.horizon(), 3.0);
        assert_eq!(g.n_steps(), 7);
        assert!(g.nodes().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn grid_validation() {
        assert_eq!(TimeGrid::uniform(0.0, 3).unwrap_err(), Error::DegenerateHorizon);
        assert!(TimeGrid::uniform(1.0, 0).is_err());
        assert!(TimeGrid::from_nodes(vec![0.0, 0.5, 0.5]).is_err());
        assert!(TimeGrid::from_nodes(vec![0.1, 0.5]).is_err());
        assert!(TimeGrid::from_nodes(vec![0.0, 0.2, 1.0]).is_ok());
    }

    #[test]
    fn grid_serde_round_trip() {
        for g in [
            TimeGrid::uniform(2.0, 5).unwrap(),
            TimeGrid::from_nodes(vec![0.0, 0.1, 0.7, 2.0]).unwrap(),
        ] {
            let json = serde_json::to_string(&g).unwrap();
            let back: TimeGrid = serde_json::from_str(&json).unwrap();
            assert_eq!(back, g);
        }
        let uniform = serde_json::to_string(&TimeGrid::uniform(2.0, 5).unwrap()).unwrap();
        assert!(!uniform.contains("nodes"));
    }

    #[test]
    fn vp_quadratic_schedule_values() {
        let grid = TimeGrid::uniform(4.0, 4).unwrap();
        let s = build_alpha_schedule(&ScheduleKind::VpQuadratic, &grid).unwrap();
        assert_eq!(s.alphas()[0], 1.0);
        assert!((s.alphas()[1] - (-1.0f64).exp()).abs() < 1e-16);
        // e^{-16} < 1e-5
        assert_eq!(s.alphas()[4], ALPHA_FLOOR);
    }

    #[test]
    fn cosine_schedule_is_clamped_at_the_end() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let s = build_alpha_schedule(&ScheduleKind::Cosine, &grid).unwrap();
        assert_eq!(s.alphas()[10], ALPHA_FLOOR);
        assert!(s.alphas().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn custom_tables_must_strictly_decrease() {
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let err = build_alpha_schedule(&ScheduleKind::Custom(vec![1.0, 0.5, 0.5]), &grid).unwrap_err();
        assert!(matches!(err, Error::InvalidSchedule(_)));
        assert!(build_alpha_schedule(&ScheduleKind::Custom(vec![1.0, 0.5, 0.1]), &grid).is_ok());
        assert!(build_alpha_schedule(&ScheduleKind::Custom(vec![0.9, 0.5, 0.1]), &grid).is_err());
    }
}
