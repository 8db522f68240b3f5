//! Observed paths on a time grid, their CSV form and a seeded
//! Ornstein–Uhlenbeck generator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formula::fmt17;
use crate::ode::{solve_sde_mc, ItoFields};

#[derive(Debug, Clone, PartialEq)]
pub struct DataPath {
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl DataPath {
    pub fn new(times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() < 2 || times.len() != values.len() {
            return Err(Error::InvalidParameter(
                "data path needs at least two matching rows".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter(
                "data times must increase strictly".into(),
            ));
        }
        let d = values[0].len();
        if d == 0 || values.iter().any(|v| v.len() != d) {
            return Err(Error::DimensionMismatch(
                "data rows differ in length".into(),
            ));
        }
        Ok(DataPath { times, values })
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Linear interpolation, constant outside the grid.
    pub fn value_at(&self, t: f64, out: &mut [f64]) {
        let n = self.times.len();
        if t <= self.times[0] {
            out.copy_from_slice(&self.values[0]);
            return;
        }
        if t >= self.times[n - 1] {
            out.copy_from_slice(&self.values[n - 1]);
            return;
        }
        let i = self.times.partition_point(|&s| s <= t) - 1;
        let w = (t - self.times[i]) / (self.times[i + 1] - self.times[i]);
        for (o, (a, b)) in out
            .iter_mut()
            .zip(self.values[i].iter().zip(&self.values[i + 1]))
        {
            *o = a + w * (b - a);
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for i in 0..self.dim() {
            s.push_str(&format!(",y{i}"));
        }
        s.push('\n');
        for (t, v) in self.times.iter().zip(&self.values) {
            s.push_str(&fmt17(*t));
            for x in v {
                s.push(',');
                s.push_str(&fmt17(*x));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        lines
            .next()
            .ok_or_else(|| Error::InvalidParameter("empty data file".into()))?;
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (row, line) in lines.enumerate() {
            let fields: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidParameter(format!("data row {}: {e}", row + 1)))?;
            let (t, v) = fields
                .split_first()
                .ok_or_else(|| Error::InvalidParameter("blank data row".into()))?;
            times.push(*t);
            values.push(v.to_vec());
        }
        DataPath::new(times, values)
    }
}

/// `dY = -θ Y dt + s dW` per component; component `i` starts at
/// `y0` with alternating sign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OuConfig {
    pub y0: f64,
    pub theta: f64,
    pub noise: f64,
    pub horizon: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for OuConfig {
    fn default() -> Self {
        OuConfig {
            y0: 2.0,
            theta: 2.0,
            noise: 0.2,
            horizon: 1.0,
            steps: 200,
            seed: 7,
        }
    }
}

pub fn generate_ou(dim: usize, cfg: &OuConfig) -> Result<DataPath> {
    if dim == 0 {
        return Err(Error::InvalidParameter(
            "data dimension must be positive".into(),
        ));
    }
    let theta = cfg.theta;
    let noise = cfg.noise;
    let ito = ItoFields::new(
        dim,
        dim,
        move |_, x, o| o.iter_mut().zip(x).for_each(|(o, x)| *o = -theta * x),
        move |_, _, o| {
            o.fill(0.0);
            for i in 0..dim {
                o[i * dim + i] = noise;
            }
        },
    );
    let mut x0 = vec![0.0; dim + 1];
    for i in 0..dim {
        x0[i + 1] = if i % 2 == 0 { cfg.y0 } else { -cfg.y0 };
    }
    let traj = solve_sde_mc(&ito, &x0, cfg.horizon, cfg.steps, cfg.seed)?;
    let values = (0..traj.len())
        .map(|i| traj.state(i)[1..].to_vec())
        .collect();
    DataPath::new(traj.times().to_vec(), values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_and_csv_round_trip() {
        let d = DataPath::new(
            vec![0.0, 0.5, 1.0],
            vec![vec![0.0, 1.0], vec![1.0, 1.0], vec![3.0, 0.0]],
        )
        .unwrap();
        let mut y = [0.0; 2];
        d.value_at(0.75, &mut y);
        assert_eq!(y, [2.0, 0.5]);
        d.value_at(2.0, &mut y);
        assert_eq!(y, [3.0, 0.0]);
        assert_eq!(DataPath::from_csv(&d.to_csv()).unwrap(), d);
    }

    #[test]
    fn ou_is_seeded_and_decays() {
        let cfg = OuConfig::default();
        let a = generate_ou(2, &cfg).unwrap();
        assert_eq!(a, generate_ou(2, &cfg).unwrap());
        assert_eq!(a.values()[0], vec![2.0, -2.0]);
        let end = a.values().last().unwrap();
        assert!(end[0].abs() < 1.0 && end[1].abs() < 1.0);
        assert_eq!(a.horizon(), 1.0);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(DataPath::new(vec![0.0, 0.0], vec![vec![1.0], vec![1.0]]).is_err());
        assert!(DataPath::from_csv("t,y0\n0,1\n0.5,x\n").is_err());
    }
}
