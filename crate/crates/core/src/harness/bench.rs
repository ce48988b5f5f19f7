//! Wall-clock scaling measurements with a least-squares fit per axis.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::group::group_setup;
use crate::node::{Labels, Node, NodeError, Profile};
use crate::repo::{to_text_map, RepoStore};
use crate::scheme::{self, AttributeSchema, PolicyPair, SchemeError};

pub const MIN_POINTS: usize = 5;
pub const MIN_REPS: usize = 10;
/// Vector width used while varying resource size.
pub const FIXED_WIDTH: usize = 4;
/// Payload size used while varying width: one resource key.
pub const FIXED_PAYLOAD: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("axis {axis} has {got} points, need at least {MIN_POINTS}")]
    InsufficientPoints { axis: &'static str, got: usize },
    #[error("{0} repetitions, need at least {MIN_REPS}")]
    InsufficientReps(usize),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub parameter: f64,
    pub mean: f64,
    pub std_dev: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `y` on `x`.
pub fn linear_fit(points: &[(f64, f64)]) -> LinearFit {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy) / (sxx * syy)
    };
    LinearFit {
        slope,
        intercept,
        r_squared,
    }
}

#[derive(Debug, Clone)]
pub struct BenchAxis {
    pub name: &'static str,
    pub unit: &'static str,
    pub points: Vec<Measurement>,
    pub fit: LinearFit,
}

impl BenchAxis {
    fn new(name: &'static str, unit: &'static str, points: Vec<Measurement>) -> Self {
        let fit = linear_fit(
            &points
                .iter()
                .map(|m| (m.parameter, m.mean))
                .collect::<Vec<_>>(),
        );
        BenchAxis {
            name,
            unit,
            points,
            fit,
        }
    }

    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| w[0].mean <= w[1].mean)
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub reps: usize,
    pub axes: Vec<BenchAxis>,
}

impl BenchmarkReport {
    pub fn axis(&self, name: &str) -> Option<&BenchAxis> {
        self.axes.iter().find(|a| a.name == name)
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("reps".into(), self.reps.to_string());
        for a in &self.axes {
            m.insert(format!("{}.unit", a.name), a.unit.into());
            m.insert(format!("{}.slope", a.name), format!("{:e}", a.fit.slope));
            m.insert(
                format!("{}.intercept", a.name),
                format!("{:e}", a.fit.intercept),
            );
            m.insert(
                format!("{}.r_squared", a.name),
                format!("{:.6}", a.fit.r_squared),
            );
            m.insert(
                format!("{}.points", a.name),
                a.points
                    .iter()
                    .map(|p| format!("{}:{:e}:{:e}", p.parameter, p.mean, p.std_dev))
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
        m
    }

    pub fn to_text(&self) -> String {
        to_text_map(&self.to_map())
    }

    /// Tab-separated `axis parameter mean_s std_s`, one row per point.
    pub fn table(&self) -> String {
        let mut s = String::from("axis\tparameter\tmean_s\tstd_s\n");
        for a in &self.axes {
            for p in &a.points {
                let _ = writeln!(
                    s,
                    "{}\t{}\t{:.6e}\t{:.6e}",
                    a.name, p.parameter, p.mean, p.std_dev
                );
            }
        }
        s
    }
}

/// One discarded warm-up run per point, then `reps` rounds that visit every
/// point once, so drift in machine load is spread evenly over the axis.
fn measure_axis<F>(
    parameters: &[f64],
    reps: usize,
    mut run: F,
) -> Result<Vec<Measurement>, BenchError>
where
    F: FnMut(usize) -> Result<(), BenchError>,
{
    for i in 0..parameters.len() {
        run(i)?;
    }
    let mut samples = vec![Vec::with_capacity(reps); parameters.len()];
    for _ in 0..reps {
        for (i, s) in samples.iter_mut().enumerate() {
            let t = Instant::now();
            run(i)?;
            s.push(t.elapsed().as_secs_f64());
        }
    }
    Ok(parameters
        .iter()
        .zip(samples)
        .map(|(&parameter, s)| {
            let mean = s.iter().sum::<f64>() / reps as f64;
            let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps as f64 - 1.0);
            Measurement {
                parameter,
                mean,
                std_dev: var.sqrt(),
            }
        })
        .collect())
}

fn publish_axis(sizes: &[usize], reps: usize, seed: u64) -> Result<BenchAxis, BenchError> {
    let repo = Arc::new(RepoStore::in_memory());
    let schema = AttributeSchema::binary(FIXED_WIDTH, 2)?;
    let mut node = Node::enroll("bench", Profile::Schema(schema), repo, Some(seed))?;
    let pairs = vec![PolicyPair::new(vec![1; FIXED_WIDTH], 1)];
    let contents: Vec<Vec<u8>> = sizes.iter().map(|&n| vec![0xA5u8; n]).collect();
    let params: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let points = measure_axis(&params, reps, |i| {
        node.publish_with(
            "r",
            "application/octet-stream",
            &contents[i],
            Labels::Pairs(pairs.clone()),
        )?;
        Ok(())
    })?;
    Ok(BenchAxis::new("publish_size", "bytes", points))
}

fn encrypt_axis(widths: &[usize], reps: usize, seed: u64) -> Result<BenchAxis, BenchError> {
    let ctx = group_setup(128, Some(b"dbra/bench/v1")).expect("128-bit level is supported");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let payload = [7u8; FIXED_PAYLOAD];
    let mut setups = Vec::with_capacity(widths.len());
    for &w in widths {
        let (pk, _) = scheme::setup(&AttributeSchema::binary(w, 2)?, &ctx, &mut rng)?;
        setups.push((
            pk,
            PolicyPair::new((0..w as u32).map(|i| i % 2).collect(), 1),
        ));
    }
    let params: Vec<f64> = widths.iter().map(|&w| w as f64).collect();
    let points = measure_axis(&params, reps, |i| {
        let (pk, pair) = &setups[i];
        scheme::encrypt(pk, pair, &payload, &mut rng)?;
        Ok(())
    })?;
    Ok(BenchAxis::new("encrypt_width", "conditions", points))
}

/// Publication time against resource size, and encryption time against
/// condition-vector width. Runs on one dedicated thread.
pub fn bench_encrypt(
    sizes: &[usize],
    widths: &[usize],
    reps: usize,
    seed: u64,
) -> Result<BenchmarkReport, BenchError> {
    if sizes.len() < MIN_POINTS {
        return Err(BenchError::InsufficientPoints {
            axis: "publish_size",
            got: sizes.len(),
        });
    }
    if widths.len() < MIN_POINTS {
        return Err(BenchError::InsufficientPoints {
            axis: "encrypt_width",
            got: widths.len(),
        });
    }
    if reps < MIN_REPS {
        return Err(BenchError::InsufficientReps(reps));
    }
    let (sizes, widths) = (sizes.to_vec(), widths.to_vec());
    std::thread::spawn(move || {
        Ok(BenchmarkReport {
            reps,
            axes: vec![
                publish_axis(&sizes, reps, seed)?,
                encrypt_axis(&widths, reps, seed)?,
            ],
        })
    })
    .join()
    .expect("bench thread panicked")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_of_exact_line() {
        let f = linear_fit(&[(1.0, 3.0), (2.0, 5.0), (3.0, 7.0), (4.0, 9.0)]);
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        let flat = linear_fit(&[(1.0, 1.0), (2.0, 3.0), (3.0, 1.0), (4.0, 3.0), (5.0, 1.0)]);
        assert!(flat.r_squared < 0.1);
    }

    #[test]
    fn rejects_small_designs() {
        assert!(matches!(
            bench_encrypt(&[1, 2, 3, 4], &[1, 2, 3, 4, 5], 10, 0),
            Err(BenchError::InsufficientPoints {
                axis: "publish_size",
                got: 4
            })
        ));
        assert!(matches!(
            bench_encrypt(&[1, 2, 3, 4, 5], &[1, 2, 3, 4, 5], 3, 0),
            Err(BenchError::InsufficientReps(3))
        ));
    }

    #[test]
    fn small_report_is_well_formed() {
        let r = bench_encrypt(
            &[1 << 10, 2 << 10, 3 << 10, 4 << 10, 5 << 10],
            &[1, 2, 3, 4, 5],
            10,
            1,
        )
        .unwrap();
        assert_eq!(r.axes.len(), 2);
        assert!(r.axes.iter().all(|a| a.points.len() == 5));
        let text = r.to_text();
        assert!(text.contains("encrypt_width.r_squared="));
        assert_eq!(r.table().lines().count(), 11);
        assert!(r.axis("encrypt_width").unwrap().fit.slope > 0.0);
    }
}
