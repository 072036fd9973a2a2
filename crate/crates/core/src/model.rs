//! Forward passes for HAR, GHAR, GHAR2Hop and K-layer GNNHAR forecasters.
//!
//! Every model shares the per-asset intercept `α` and the own-lag term `Vβ`;
//! they differ only in the spillover term added on top.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::LagFeatures;
use crate::error::{Error, Result};
use crate::graph::{hop2, k_hop_neighbors, normalize, Adjacency, NormalizedAdjacency};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelKind {
    Har,
    Ghar,
    Ghar2Hop,
    Gnnhar { layers: usize },
}

impl ModelKind {
    pub fn is_linear(self) -> bool {
        !matches!(self, ModelKind::Gnnhar { .. })
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Har => write!(f, "HAR"),
            ModelKind::Ghar => write!(f, "GHAR"),
            ModelKind::Ghar2Hop => write!(f, "GHAR2Hop"),
            ModelKind::Gnnhar { layers } => write!(f, "GNNHAR{layers}L"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "HAR" => Ok(ModelKind::Har),
            "GHAR" => Ok(ModelKind::Ghar),
            "GHAR2Hop" => Ok(ModelKind::Ghar2Hop),
            _ => s
                .strip_prefix("GNNHAR")
                .and_then(|r| r.strip_suffix('L'))
                .and_then(|l| l.parse().ok())
                .filter(|&l: &usize| l >= 1)
                .map(|layers| ModelKind::Gnnhar { layers })
                .ok_or_else(|| Error::InvalidInput(format!("unknown model kind `{s}`"))),
        }
    }
}

/// Coefficients of the linear family. `gamma` weights the 1st-hop aggregate
/// `W₁V`, `delta` the 2nd-hop aggregate `W₂V`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub alpha: DVector<f64>,
    pub beta: [f64; 3],
    pub gamma: Option<[f64; 3]>,
    pub delta: Option<[f64; 3]>,
}

impl LinearParams {
    pub fn kind(&self) -> Result<ModelKind> {
        match (self.gamma, self.delta) {
            (None, None) => Ok(ModelKind::Har),
            (Some(_), None) => Ok(ModelKind::Ghar),
            (Some(_), Some(_)) => Ok(ModelKind::Ghar2Hop),
            (None, Some(_)) => Err(Error::Shape("2nd-hop coefficients without 1st-hop coefficients".into())),
        }
    }
}

/// GNNHAR coefficients; `layers[l]` maps dimension `D_l` to `D_{l+1}` with `D_0 = 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams {
    pub alpha: DVector<f64>,
    pub beta: [f64; 3],
    pub layers: Vec<DMatrix<f64>>,
    pub gamma: DVector<f64>,
}

impl GnnParams {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn check_shapes(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("GNNHAR needs at least one layer".into()));
        }
        let mut dim = 3;
        for (l, theta) in self.layers.iter().enumerate() {
            if theta.nrows() != dim {
                return Err(Error::Shape(format!(
                    "layer {l} expects {dim} input rows, has {}",
                    theta.nrows()
                )));
            }
            dim = theta.ncols();
        }
        if self.gamma.len() != dim {
            return Err(Error::Shape(format!(
                "gamma has length {}, last layer width is {dim}",
                self.gamma.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Linear(LinearParams),
    Gnn(GnnParams),
}

impl ModelParams {
    pub fn kind(&self) -> Result<ModelKind> {
        match self {
            ModelParams::Linear(p) => p.kind(),
            ModelParams::Gnn(p) => Ok(ModelKind::Gnnhar { layers: p.n_layers() }),
        }
    }

    pub fn alpha(&self) -> &DVector<f64> {
        match self {
            ModelParams::Linear(p) => &p.alpha,
            ModelParams::Gnn(p) => &p.alpha,
        }
    }

    pub fn beta(&self) -> [f64; 3] {
        match self {
            ModelParams::Linear(p) => p.beta,
            ModelParams::Gnn(p) => p.beta,
        }
    }
}

/// Graph operators a forecaster may need, built once per graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphOperators {
    pub first_hop: NormalizedAdjacency,
    pub second_hop: NormalizedAdjacency,
}

impl GraphOperators {
    pub fn new(a: &Adjacency) -> Self {
        Self {
            first_hop: normalize(a),
            second_hop: normalize(&hop2(a)),
        }
    }

    pub fn n(&self) -> usize {
        self.first_hop.n()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub origin: usize,
    pub horizon: usize,
    pub values: DVector<f64>,
}

fn check_rows(v: &DMatrix<f64>, n: usize, what: &str) -> Result<()> {
    if v.nrows() != n || v.ncols() != 3 {
        return Err(Error::Shape(format!(
            "lag features are {}x{}, expected {n}x3 to match {what}",
            v.nrows(),
            v.ncols()
        )));
    }
    Ok(())
}

fn check_operator(w: &NormalizedAdjacency, n: usize) -> Result<()> {
    if w.n() != n {
        return Err(Error::Shape(format!(
            "graph has {} nodes, features have {n} rows",
            w.n()
        )));
    }
    Ok(())
}

fn own_part(v: &DMatrix<f64>, alpha: &DVector<f64>, beta: &[f64; 3]) -> DVector<f64> {
    DVector::from_fn(v.nrows(), |i, _| {
        alpha[i] + beta[0] * v[(i, 0)] + beta[1] * v[(i, 1)] + beta[2] * v[(i, 2)]
    })
}

fn add_aggregate(out: &mut DVector<f64>, agg: &DMatrix<f64>, coef: &[f64; 3]) {
    for i in 0..out.len() {
        out[i] += coef[0] * agg[(i, 0)] + coef[1] * agg[(i, 1)] + coef[2] * agg[(i, 2)];
    }
}

/// `α + Vβ` on a raw N×3 lag matrix.
pub fn har_values(v: &DMatrix<f64>, p: &LinearParams) -> Result<DVector<f64>> {
    if p.gamma.is_some() || p.delta.is_some() {
        return Err(Error::Shape("HAR takes no spillover coefficients".into()));
    }
    check_rows(v, p.alpha.len(), "the intercepts")?;
    Ok(own_part(v, &p.alpha, &p.beta))
}

/// `α + Vβ + (WV)γ` on a raw N×3 lag matrix.
pub fn ghar_values(v: &DMatrix<f64>, w: &NormalizedAdjacency, p: &LinearParams) -> Result<DVector<f64>> {
    let (Some(gamma), None) = (p.gamma, p.delta) else {
        return Err(Error::Shape("GHAR needs gamma and no delta".into()));
    };
    check_rows(v, p.alpha.len(), "the intercepts")?;
    check_operator(w, v.nrows())?;
    let mut out = own_part(v, &p.alpha, &p.beta);
    add_aggregate(&mut out, &(w.matrix() * v), &gamma);
    Ok(out)
}

/// `α + Vβ + (W₁V)γ + (W₂V)δ` on a raw N×3 lag matrix.
pub fn ghar2hop_values(
    v: &DMatrix<f64>,
    w1: &NormalizedAdjacency,
    w2: &NormalizedAdjacency,
    p: &LinearParams,
) -> Result<DVector<f64>> {
    let (Some(gamma), Some(delta)) = (p.gamma, p.delta) else {
        return Err(Error::Shape("GHAR2Hop needs gamma and delta".into()));
    };
    check_rows(v, p.alpha.len(), "the intercepts")?;
    check_operator(w1, v.nrows())?;
    check_operator(w2, v.nrows())?;
    let mut out = own_part(v, &p.alpha, &p.beta);
    add_aggregate(&mut out, &(w1.matrix() * v), &gamma);
    add_aggregate(&mut out, &(w2.matrix() * v), &delta);
    Ok(out)
}

/// `ReLU(W H Θ)`.
pub fn gnn_layer(h: &DMatrix<f64>, w: &NormalizedAdjacency, theta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_operator(w, h.nrows())?;
    if theta.nrows() != h.ncols() {
        return Err(Error::Shape(format!(
            "layer weights have {} rows for a {}-wide input",
            theta.nrows(),
            h.ncols()
        )));
    }
    Ok((w.matrix() * h * theta).map(|x| x.max(0.0)))
}

/// Final hidden representation `H^(L)`.
pub fn gnnhar_hidden(v: &DMatrix<f64>, w: &NormalizedAdjacency, p: &GnnParams) -> Result<DMatrix<f64>> {
    p.check_shapes()?;
    check_rows(v, p.alpha.len(), "the intercepts")?;
    let mut h = v.clone();
    for theta in &p.layers {
        h = gnn_layer(&h, w, theta)?;
    }
    Ok(h)
}

/// `α + Vβ + H^(L)γ` on a raw N×3 lag matrix.
pub fn gnnhar_values(v: &DMatrix<f64>, w: &NormalizedAdjacency, p: &GnnParams) -> Result<DVector<f64>> {
    let h = gnnhar_hidden(v, w, p)?;
    Ok(own_part(v, &p.alpha, &p.beta) + h * &p.gamma)
}

pub fn har_forward(v: &LagFeatures, p: &LinearParams) -> Result<Forecast> {
    Ok(forecast_at(v, har_values(&v.matrix, p)?))
}

pub fn ghar_forward(v: &LagFeatures, w: &NormalizedAdjacency, p: &LinearParams) -> Result<Forecast> {
    Ok(forecast_at(v, ghar_values(&v.matrix, w, p)?))
}

pub fn ghar2hop_forward(
    v: &LagFeatures,
    w1: &NormalizedAdjacency,
    w2: &NormalizedAdjacency,
    p: &LinearParams,
) -> Result<Forecast> {
    Ok(forecast_at(v, ghar2hop_values(&v.matrix, w1, w2, p)?))
}

pub fn gnnhar_forward(v: &LagFeatures, w: &NormalizedAdjacency, p: &GnnParams) -> Result<Forecast> {
    Ok(forecast_at(v, gnnhar_values(&v.matrix, w, p)?))
}

fn forecast_at(v: &LagFeatures, values: DVector<f64>) -> Forecast {
    Forecast {
        origin: v.origin,
        horizon: 0,
        values,
    }
}

impl ModelParams {
    /// Dispatches to the forward pass matching the parameter layout.
    pub fn predict(&self, v: &DMatrix<f64>, ops: &GraphOperators) -> Result<DVector<f64>> {
        match self {
            ModelParams::Linear(p) => match p.kind()? {
                ModelKind::Har => har_values(v, p),
                ModelKind::Ghar => ghar_values(v, &ops.first_hop, p),
                _ => ghar2hop_values(v, &ops.first_hop, &ops.second_hop, p),
            },
            ModelParams::Gnn(p) => gnnhar_values(v, &ops.first_hop, p),
        }
    }

    pub fn forecast(&self, v: &LagFeatures, ops: &GraphOperators, horizon: usize) -> Result<Forecast> {
        Ok(Forecast {
            origin: v.origin,
            horizon,
            values: self.predict(&v.matrix, ops)?,
        })
    }
}

/// Nodes that can influence node `v`'s output after `p.n_layers()` layers.
pub fn receptive_field_check(p: &GnnParams, a: &Adjacency, v: usize) -> Result<BTreeSet<usize>> {
    k_hop_neighbors(a, v, p.n_layers())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerSnapshot {
    rows: usize,
    cols: usize,
    /// Row-major.
    values: Vec<f64>,
}

/// Serialized parameter document: model kind, shapes and flat coefficient arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    kind: String,
    n_assets: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    delta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    layers: Vec<LayerSnapshot>,
}

fn triple(v: &[f64], what: &str) -> Result<[f64; 3]> {
    v.try_into()
        .map_err(|_| Error::Shape(format!("{what} must have 3 entries, has {}", v.len())))
}

impl ModelParams {
    pub fn to_snapshot(&self) -> Result<ParamSnapshot> {
        let kind = self.kind()?.to_string();
        let alpha = self.alpha().as_slice().to_vec();
        Ok(match self {
            ModelParams::Linear(p) => ParamSnapshot {
                kind,
                n_assets: alpha.len(),
                alpha,
                beta: p.beta.to_vec(),
                gamma: p.gamma.map(|g| g.to_vec()),
                delta: p.delta.map(|d| d.to_vec()),
                layers: Vec::new(),
            },
            ModelParams::Gnn(p) => ParamSnapshot {
                kind,
                n_assets: alpha.len(),
                alpha,
                beta: p.beta.to_vec(),
                gamma: Some(p.gamma.as_slice().to_vec()),
                delta: None,
                layers: p
                    .layers
                    .iter()
                    .map(|t| LayerSnapshot {
                        rows: t.nrows(),
                        cols: t.ncols(),
                        values: t.transpose().as_slice().to_vec(),
                    })
                    .collect(),
            },
        })
    }

    pub fn from_snapshot(s: &ParamSnapshot) -> Result<Self> {
        if s.alpha.len() != s.n_assets {
            return Err(Error::Shape(format!(
                "{} intercepts for {} assets",
                s.alpha.len(),
                s.n_assets
            )));
        }
        let alpha = DVector::from_vec(s.alpha.clone());
        let beta = triple(&s.beta, "beta")?;
        let params = match s.kind.parse::<ModelKind>()? {
            ModelKind::Gnnhar { layers } => {
                if s.layers.len() != layers {
                    return Err(Error::Shape(format!(
                        "{} declares {layers} layers, found {}",
                        s.kind,
                        s.layers.len()
                    )));
                }
                let mut mats = Vec::with_capacity(layers);
                for l in &s.layers {
                    if l.values.len() != l.rows * l.cols {
                        return Err(Error::Shape(format!(
                            "layer of {}x{} has {} values",
                            l.rows,
                            l.cols,
                            l.values.len()
                        )));
                    }
                    mats.push(DMatrix::from_row_slice(l.rows, l.cols, &l.values));
                }
                let gamma = s
                    .gamma
                    .clone()
                    .ok_or_else(|| Error::Shape("GNNHAR snapshot lacks gamma".into()))?;
                let p = GnnParams {
                    alpha,
                    beta,
                    layers: mats,
                    gamma: DVector::from_vec(gamma),
                };
                p.check_shapes()?;
                ModelParams::Gnn(p)
            }
            kind => {
                let p = LinearParams {
                    alpha,
                    beta,
                    gamma: s.gamma.as_deref().map(|g| triple(g, "gamma")).transpose()?,
                    delta: s.delta.as_deref().map(|d| triple(d, "delta")).transpose()?,
                };
                if p.kind()? != kind {
                    return Err(Error::Shape(format!(
                        "coefficients do not match declared kind {}",
                        s.kind
                    )));
                }
                ModelParams::Linear(p)
            }
        };
        Ok(params)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.to_snapshot()?)
            .map_err(|e| Error::InvalidInput(format!("cannot serialize parameters: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let snap: ParamSnapshot =
            serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("bad parameter snapshot: {e}")))?;
        Self::from_snapshot(&snap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::{erdos_renyi, example_graph};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear(alpha: Vec<f64>, beta: [f64; 3], gamma: Option<[f64; 3]>, delta: Option<[f64; 3]>) -> LinearParams {
        LinearParams {
            alpha: DVector::from_vec(alpha),
            beta,
            gamma,
            delta,
        }
    }

    fn random_gnn(n: usize, dims: &[usize], rng: &mut impl Rng) -> GnnParams {
        let mut layers = Vec::new();
        let mut d = 3;
        for &h in dims {
            layers.push(DMatrix::from_fn(d, h, |_, _| rng.random_range(-1.0..1.0)));
            d = h;
        }
        GnnParams {
            alpha: DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
            beta: [rng.random(), rng.random(), rng.random()],
            layers,
            gamma: DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
        }
    }

    #[test]
    fn har_examples() {
        let v = DMatrix::from_row_slice(2, 3, &[2.0, 1.0, 1.0, 5.0, 6.0, 7.0]);
        let c = har_values(&v, &linear(vec![0.7, 0.7], [0.0; 3], None, None)).unwrap();
        assert_eq!(c.as_slice(), &[0.7, 0.7]);
        let rw = har_values(&v, &linear(vec![0.0, 0.0], [1.0, 0.0, 0.0], None, None)).unwrap();
        assert_eq!(rw.as_slice(), &[2.0, 5.0]);
        let f = har_values(&v, &linear(vec![0.1, 0.1], [0.5, 0.3, 0.2], None, None)).unwrap();
        assert!((f[0] - 1.6).abs() < 1e-15);
    }

    #[test]
    fn har_rejects_bad_shapes() {
        let v = DMatrix::zeros(3, 3);
        assert!(har_values(&v, &linear(vec![0.0; 2], [0.0; 3], None, None)).is_err());
        assert!(har_values(
            &DMatrix::zeros(2, 3),
            &linear(vec![0.0; 2], [0.0; 3], Some([0.0; 3]), None)
        )
        .is_err());
    }

    #[test]
    fn ghar_examples() {
        let w = normalize(&Adjacency::complete(2));
        let v = DMatrix::from_row_slice(2, 3, &[2.0, 0.3, 0.1, 4.0, 0.2, 0.9]);
        let p = linear(vec![0.0, 0.0], [1.0, 0.0, 0.0], Some([1.0, 0.0, 0.0]), None);
        assert_eq!(ghar_values(&v, &w, &p).unwrap().as_slice(), &[6.0, 6.0]);

        let base = linear(vec![0.2, 0.4], [0.3, 0.2, 0.1], None, None);
        let har = har_values(&v, &base).unwrap();
        let empty = NormalizedAdjacency::zeros(2);
        let with_gamma = LinearParams {
            gamma: Some([0.4, 0.5, 0.6]),
            ..base.clone()
        };
        assert_eq!(ghar_values(&v, &empty, &with_gamma).unwrap(), har);
        let zero_gamma = LinearParams {
            gamma: Some([0.0; 3]),
            ..base
        };
        assert_eq!(ghar_values(&v, &w, &zero_gamma).unwrap(), har);
    }

    #[test]
    fn ghar2hop_examples() {
        let v = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let gamma = Some([0.3, 0.2, 0.1]);
        let ghar = linear(vec![0.1, 0.2, 0.3], [0.5, 0.1, 0.1], gamma, None);

        // δ = 0 reduces to GHAR
        let ops = GraphOperators::new(&Adjacency::path(3));
        let zero = LinearParams {
            delta: Some([0.0; 3]),
            ..ghar.clone()
        };
        assert_eq!(
            ghar2hop_values(&v, &ops.first_hop, &ops.second_hop, &zero).unwrap(),
            ghar_values(&v, &ops.first_hop, &ghar).unwrap()
        );

        // K3 has no 2nd-hop pairs
        let k3 = GraphOperators::new(&Adjacency::complete(3));
        let any = LinearParams {
            delta: Some([5.0, -2.0, 1.0]),
            ..ghar.clone()
        };
        assert_eq!(
            ghar2hop_values(&v, &k3.first_hop, &k3.second_hop, &any).unwrap(),
            ghar_values(&v, &k3.first_hop, &ghar).unwrap()
        );

        // P3: endpoints are each other's only 2nd-hop neighbor; the middle has none
        let only_delta = linear(vec![0.0; 3], [0.0; 3], Some([0.0; 3]), Some([1.0, 0.0, 0.0]));
        let f = ghar2hop_values(&v, &ops.first_hop, &ops.second_hop, &only_delta).unwrap();
        assert_eq!(f.as_slice(), &[7.0, 0.0, 1.0]);
    }

    #[test]
    fn gnn_layer_examples() {
        let w = normalize(&Adjacency::complete(2));
        let h = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        let e1 = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        assert_eq!(gnn_layer(&h, &w, &e1).unwrap().as_slice(), &[2.0, 1.0]);
        assert!(gnn_layer(&h, &w, &DMatrix::zeros(3, 4))
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
        assert!(gnn_layer(&h, &NormalizedAdjacency::zeros(2), &e1)
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
        assert!(gnn_layer(&h, &w, &DMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn gnnhar_reduces_to_har_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ops = GraphOperators::new(&example_graph());
        let v = DMatrix::from_fn(5, 3, |_, _| rng.random_range(0.0..2.0));
        let mut p = random_gnn(5, &[4, 2], &mut rng);
        let har = own_part(&v, &p.alpha, &p.beta);
        p.gamma.fill(0.0);
        assert_eq!(gnnhar_values(&v, &ops.first_hop, &p).unwrap(), har);
        let mut q = random_gnn(5, &[4], &mut rng);
        q.layers[0].fill(0.0);
        assert_eq!(
            gnnhar_values(&v, &ops.first_hop, &q).unwrap(),
            own_part(&v, &q.alpha, &q.beta)
        );
    }

    #[test]
    fn empty_graph_collapses_every_model_to_har() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ops = GraphOperators::new(&Adjacency::empty(4));
        let v = DMatrix::from_fn(4, 3, |_, _| rng.random_range(0.0..2.0));
        let har = linear(vec![0.1, 0.2, 0.3, 0.4], [0.4, 0.3, 0.2], None, None);
        let want = ModelParams::Linear(har.clone()).predict(&v, &ops).unwrap();
        let ghar = LinearParams {
            gamma: Some([1.0, 2.0, 3.0]),
            ..har.clone()
        };
        let two = LinearParams {
            delta: Some([3.0, 2.0, 1.0]),
            ..ghar.clone()
        };
        let mut gnn = random_gnn(4, &[3], &mut rng);
        gnn.alpha = har.alpha.clone();
        gnn.beta = har.beta;
        for p in [
            ModelParams::Linear(ghar),
            ModelParams::Linear(two),
            ModelParams::Gnn(gnn),
        ] {
            assert_eq!(p.predict(&v, &ops).unwrap(), want);
        }
    }

    #[test]
    fn receptive_field_examples() {
        let a = example_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p1 = random_gnn(5, &[3], &mut rng);
        assert_eq!(receptive_field_check(&p1, &a, 0).unwrap(), BTreeSet::from([0, 1]));
        let p3 = random_gnn(5, &[3, 3, 3], &mut rng);
        assert_eq!(receptive_field_check(&p3, &a, 0).unwrap().len(), 5);
    }

    #[test]
    fn receptive_field_locality() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for case in 0..50 {
            let n = rng.random_range(4..15);
            let a = erdos_renyi(n, rng.random_range(0.1..0.5), &mut rng);
            let w = normalize(&a);
            let layers = 1 + case % 3;
            let dims: Vec<usize> = (0..layers).map(|_| rng.random_range(1..6)).collect();
            let p = random_gnn(n, &dims, &mut rng);
            let node = rng.random_range(0..n);
            let field = receptive_field_check(&p, &a, node).unwrap();
            let v = DMatrix::from_fn(n, 3, |_, _| rng.random_range(0.0..1.0));
            let mut u = v.clone();
            for i in (0..n).filter(|i| !field.contains(i)) {
                for c in 0..3 {
                    u[(i, c)] += rng.random_range(0.5..5.0);
                }
            }
            let fv = gnnhar_values(&v, &w, &p).unwrap();
            let fu = gnnhar_values(&u, &w, &p).unwrap();
            assert_eq!(fv[node].to_bits(), fu[node].to_bits(), "case {case}");
        }
    }

    #[test]
    fn model_kind_names_roundtrip() {
        for k in [
            ModelKind::Har,
            ModelKind::Ghar,
            ModelKind::Ghar2Hop,
            ModelKind::Gnnhar { layers: 3 },
        ] {
            assert_eq!(k.to_string().parse::<ModelKind>().unwrap(), k);
        }
        assert!("GNNHAR0L".parse::<ModelKind>().is_err());
        assert!("LSTM".parse::<ModelKind>().is_err());
    }

    #[test]
    fn snapshot_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ops = GraphOperators::new(&example_graph());
        let v = DMatrix::from_fn(5, 3, |_, _| rng.random_range(0.0..1.0));
        let lin = ModelParams::Linear(LinearParams {
            alpha: DVector::from_fn(5, |_, _| rng.random::<f64>() * 1e-4),
            beta: [rng.random(), rng.random(), 1.0 / 3.0],
            gamma: Some([0.1, 0.2, 0.3]),
            delta: Some([std::f64::consts::PI, -1e-300, 7e22]),
        });
        let gnn = ModelParams::Gnn(random_gnn(5, &[4, 2], &mut rng));
        for p in [lin, gnn] {
            let back = ModelParams::from_json(&p.to_json().unwrap()).unwrap();
            assert_eq!(back, p);
            let (a, b) = (p.predict(&v, &ops).unwrap(), back.predict(&v, &ops).unwrap());
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    proptest! {
        #[test]
        fn gnn_nests_ghar_daily_spillover(vals in proptest::collection::vec(0.0f64..10.0, 15), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = erdos_renyi(5, 0.5, &mut rng);
            let w = normalize(&a);
            let v = DMatrix::from_row_slice(5, 3, &vals);
            let p = GnnParams {
                alpha: DVector::zeros(5),
                beta: [0.0; 3],
                layers: vec![DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0])],
                gamma: DVector::from_element(1, 1.0),
            };
            let want = w.matrix() * v.column(0);
            let got = gnnhar_values(&v, &w, &p).unwrap();
            for i in 0..5 {
                prop_assert_eq!(got[i], want[i]);
            }
        }
    }
}
