//! Synthetic observing-system masks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::SpaceTimeGrid;
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObsPattern {
    /// Each cell observed independently with probability `density`.
    Random { density: f64 },
    /// `n_tracks` straight swaths per time slab, `width` cells wide, at
    /// angles (degrees from the x axis) drawn in `[angle_min, angle_max]`.
    Tracks { n_tracks: usize, width: f64, angle_min: f64, angle_max: f64 },
    /// `n_blocks` square patches of side `size` per time slab.
    Blocks { n_blocks: usize, size: usize },
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;

pub fn generate_obs_mask(grid: &SpaceTimeGrid, pattern: ObsPattern, seed: u64) -> Result<Vec<bool>> {
    let m = grid.state_dim();
    let mut mask = vec![false; grid.trajectory_dim()];
    match pattern {
        ObsPattern::Random { density } => {
            if !(density > 0.0 && density <= 1.0) {
                return Err(Error::InvalidParams(format!("density must be in (0, 1], got {density}")));
            }
            for t in 0..grid.nt {
                let mut rng = stream(seed, 0, t as u64, Purpose::Mask);
                for v in &mut mask[t * m..(t + 1) * m] {
                    *v = rng.random::<f64>() < density;
                }
            }
        }
        ObsPattern::Tracks { n_tracks, width, angle_min, angle_max } => {
            if n_tracks == 0 || !(width >= 1.0) || angle_min > angle_max {
                return Err(Error::InvalidParams(
                    "tracks need n_tracks >= 1, width >= 1, angle_min <= angle_max".into(),
                ));
            }
            let (cx, cy) = ((grid.nx as f64 - 1.0) / 2.0, (grid.ny as f64 - 1.0) / 2.0);
            let span = ((grid.nx * grid.nx + grid.ny * grid.ny) as f64).sqrt();
            for j in 0..n_tracks {
                let mut rng = stream(seed, j as u64, 0, Purpose::Mask);
                let deg = if angle_max > angle_min { rng.random_range(angle_min..=angle_max) } else { angle_min };
                let (s, c) = deg.to_radians().sin_cos();
                for t in 0..grid.nt {
                    // tracks spread evenly, drifting by the golden ratio each slab
                    let phase = (0.5 + j as f64 / n_tracks as f64 + t as f64 * GOLDEN).fract();
                    let offset = (phase - 0.5) * span;
                    for y in 0..grid.ny {
                        for x in 0..grid.nx {
                            let d = (x as f64 - cx) * s - (y as f64 - cy) * c - offset;
                            if d.abs() <= width / 2.0 + 1e-12 {
                                mask[t * m + grid.cell(y, x)] = true;
                            }
                        }
                    }
                }
            }
        }
        ObsPattern::Blocks { n_blocks, size } => {
            if n_blocks == 0 || size == 0 || size > grid.nx.min(grid.ny) {
                return Err(Error::InvalidParams("blocks need n_blocks >= 1 and 1 <= size <= min(nx, ny)".into()));
            }
            for t in 0..grid.nt {
                for b in 0..n_blocks {
                    let mut rng = stream(seed, b as u64, t as u64, Purpose::Mask);
                    let x0 = rng.random_range(0..=grid.nx - size);
                    let y0 = rng.random_range(0..=grid.ny - size);
                    for y in y0..y0 + size {
                        for x in x0..x0 + size {
                            mask[t * m + grid.cell(y, x)] = true;
                        }
                    }
                }
            }
        }
    }
    Ok(mask)
}

pub fn observed_fraction(mask: &[bool]) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.iter().filter(|&&b| b).count() as f64 / mask.len() as f64
}
