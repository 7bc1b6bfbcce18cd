//! GRU cell and bidirectional GRU encoder over an utterance sequence.
//!
//! Gate equations (reset applied before the recurrent candidate product):
//!
//! ```text
//! z  = sigmoid(x W_z + h U_z + b_z)
//! r  = sigmoid(x W_r + h U_r + b_r)
//! h~ = tanh(x W_h + (r * h) U_h + b_h)
//! h' = (1 - z) * h + z * h~
//! ```

use crate::tensor::{Graph, Result, Tensor, TensorError, Var};
use rand::Rng;

/// Weights of one GRU direction.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

/// Parameter names within one direction, in registry order.
pub const GRU_PARAM_NAMES: [&str; 9] = [
    "w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h",
];

impl GruParams {
    pub fn zeros(d_in: usize, d: usize) -> Self {
        Self {
            w_z: Tensor::zeros(d_in, d),
            w_r: Tensor::zeros(d_in, d),
            w_h: Tensor::zeros(d_in, d),
            u_z: Tensor::zeros(d, d),
            u_r: Tensor::zeros(d, d),
            u_h: Tensor::zeros(d, d),
            b_z: Tensor::zeros(1, d),
            b_r: Tensor::zeros(1, d),
            b_h: Tensor::zeros(1, d),
        }
    }

    /// Input matrices uniform in `±1/sqrt(d_in)`, recurrent matrices in
    /// `±1/sqrt(d)`, zero biases.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d: usize, rng: &mut R) -> Self {
        let kin = 1.0 / (d_in as f64).sqrt();
        let kh = 1.0 / (d as f64).sqrt();
        Self {
            w_z: Tensor::uniform(d_in, d, kin, rng),
            w_r: Tensor::uniform(d_in, d, kin, rng),
            w_h: Tensor::uniform(d_in, d, kin, rng),
            u_z: Tensor::uniform(d, d, kh, rng),
            u_r: Tensor::uniform(d, d, kh, rng),
            u_h: Tensor::uniform(d, d, kh, rng),
            b_z: Tensor::zeros(1, d),
            b_r: Tensor::zeros(1, d),
            b_h: Tensor::zeros(1, d),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.u_z.rows()
    }

    pub fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z, &self.b_r,
            &self.b_h,
        ]
    }

    /// Rebuilds from tensors in [`GRU_PARAM_NAMES`] order, validating shapes.
    pub fn from_tensors(t: [Tensor; 9]) -> Result<Self> {
        let [w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h] = t;
        let p = Self {
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z,
            b_r,
            b_h,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (d_in, d) = self.w_z.shape();
        let want = [
            (d_in, d),
            (d_in, d),
            (d_in, d),
            (d, d),
            (d, d),
            (d, d),
            (1, d),
            (1, d),
            (1, d),
        ];
        for (t, w) in self.tensors().iter().zip(want) {
            if t.shape() != w {
                return Err(TensorError::Shape {
                    op: "gru_params",
                    left: w,
                    right: t.shape(),
                });
            }
        }
        Ok(())
    }

    /// Adds every weight to `g` as a trainable leaf.
    pub fn register(&self, g: &mut Graph) -> GruVars {
        GruVars {
            w_z: g.param(self.w_z.clone()),
            w_r: g.param(self.w_r.clone()),
            w_h: g.param(self.w_h.clone()),
            u_z: g.param(self.u_z.clone()),
            u_r: g.param(self.u_r.clone()),
            u_h: g.param(self.u_h.clone()),
            b_z: g.param(self.b_z.clone()),
            b_r: g.param(self.b_r.clone()),
            b_h: g.param(self.b_h.clone()),
        }
    }
}

/// Graph handles for one GRU direction.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

impl GruVars {
    pub fn vars(&self) -> [Var; 9] {
        [
            self.w_z, self.w_r, self.w_h, self.u_z, self.u_r, self.u_h, self.b_z, self.b_r,
            self.b_h,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiGruParams {
    pub forward: GruParams,
    pub backward: GruParams,
}

impl BiGruParams {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d: usize, rng: &mut R) -> Self {
        let forward = GruParams::init(d_in, d, rng);
        let backward = GruParams::init(d_in, d, rng);
        Self { forward, backward }
    }

    pub fn register(&self, g: &mut Graph) -> BiGruVars {
        BiGruVars {
            forward: self.forward.register(g),
            backward: self.backward.register(g),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BiGruVars {
    pub forward: GruVars,
    pub backward: GruVars,
}

/// Input projections `X W + b` for all timesteps at once.
struct Projections {
    z: Var,
    r: Var,
    h: Var,
}

fn project(g: &mut Graph, x: Var, p: &GruVars) -> Result<Projections> {
    let xz = g.matmul(x, p.w_z)?;
    let xr = g.matmul(x, p.w_r)?;
    let xh = g.matmul(x, p.w_h)?;
    Ok(Projections {
        z: g.add_row(xz, p.b_z)?,
        r: g.add_row(xr, p.b_r)?,
        h: g.add_row(xh, p.b_h)?,
    })
}

fn step(g: &mut Graph, proj: &Projections, t: usize, h_prev: Var, p: &GruVars) -> Result<Var> {
    let xz = g.row(proj.z, t)?;
    let xr = g.row(proj.r, t)?;
    let xh = g.row(proj.h, t)?;

    let hz = g.matmul(h_prev, p.u_z)?;
    let z_in = g.add(xz, hz)?;
    let z = g.sigmoid(z_in);

    let hr = g.matmul(h_prev, p.u_r)?;
    let r_in = g.add(xr, hr)?;
    let r = g.sigmoid(r_in);

    let rh = g.mul(r, h_prev)?;
    let hh = g.matmul(rh, p.u_h)?;
    let cand_in = g.add(xh, hh)?;
    let cand = g.tanh(cand_in);

    let ones = g.constant(Tensor::ones(1, g.shape(z).1));
    let keep = g.sub(ones, z)?;
    let old = g.mul(keep, h_prev)?;
    let new = g.mul(z, cand)?;
    g.add(old, new)
}

/// One GRU step on the graph: `x_t` is `1 x d_in`, `h_prev` is `1 x d`.
pub fn gru_cell_graph(g: &mut Graph, x_t: Var, h_prev: Var, p: &GruVars) -> Result<Var> {
    let (xr, _) = g.shape(x_t);
    let (hr, _) = g.shape(h_prev);
    if xr != 1 || hr != 1 {
        return Err(TensorError::Shape {
            op: "gru_cell",
            left: g.shape(x_t),
            right: g.shape(h_prev),
        });
    }
    let proj = project(g, x_t, p)?;
    step(g, &proj, 0, h_prev, p)
}

fn run_direction(g: &mut Graph, x: Var, p: &GruVars, reverse: bool) -> Result<Vec<Var>> {
    let u = g.shape(x).0;
    let d = g.shape(p.u_z).0;
    let proj = project(g, x, p)?;
    let mut h = g.constant(Tensor::zeros(1, d));
    let mut states = vec![h; u];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..u).rev())
    } else {
        Box::new(0..u)
    };
    for t in order {
        h = step(g, &proj, t, h, p)?;
        states[t] = h;
    }
    Ok(states)
}

/// Bidirectional GRU over `x` (`u x d_in`), returning `u x 2d`.
///
/// Row `i` is the forward state after utterances `1..=i` followed by the
/// backward state after utterances `u..=i`. Both directions start from zero.
pub fn bigru_graph(g: &mut Graph, x: Var, p: &BiGruVars) -> Result<Var> {
    let (u, d_in) = g.shape(x);
    if u == 0 {
        return Err(TensorError::Invalid {
            op: "bigru",
            msg: "empty utterance sequence".into(),
        });
    }
    let w_shape = g.shape(p.forward.w_z);
    if w_shape.0 != d_in {
        return Err(TensorError::Shape {
            op: "bigru",
            left: (u, d_in),
            right: w_shape,
        });
    }
    let fwd = run_direction(g, x, &p.forward, false)?;
    let bwd = run_direction(g, x, &p.backward, true)?;
    let rows = fwd
        .into_iter()
        .zip(bwd)
        .map(|(f, b)| g.concat_cols(&[f, b]))
        .collect::<Result<Vec<_>>>()?;
    g.concat_rows(&rows)
}

/// Value-only GRU step.
pub fn gru_cell(x_t: &Tensor, h_prev: &Tensor, p: &GruParams) -> Result<Tensor> {
    p.validate()?;
    if x_t.shape() != (1, p.input_dim()) || h_prev.shape() != (1, p.hidden_dim()) {
        return Err(TensorError::Shape {
            op: "gru_cell",
            left: x_t.shape(),
            right: h_prev.shape(),
        });
    }
    let mut g = Graph::new();
    let vars = p.register(&mut g);
    let x = g.constant(x_t.clone());
    let h = g.constant(h_prev.clone());
    let out = gru_cell_graph(&mut g, x, h, &vars)?;
    Ok(g.value(out).clone())
}

/// Value-only bidirectional GRU.
pub fn bigru(x: &Tensor, p: &BiGruParams) -> Result<Tensor> {
    p.forward.validate()?;
    p.backward.validate()?;
    let mut g = Graph::new();
    let vars = p.register(&mut g);
    let x = g.constant(x.clone());
    let out = bigru_graph(&mut g, x, &vars)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Scalar GRU written out by hand, one multiply at a time.
    fn scalar_gru(x: f64, h: f64, w: [f64; 3], u: [f64; 3], b: [f64; 3]) -> f64 {
        let z = sig(x * w[0] + h * u[0] + b[0]);
        let r = sig(x * w[1] + h * u[1] + b[1]);
        let c = (x * w[2] + (r * h) * u[2] + b[2]).tanh();
        (1.0 - z) * h + z * c
    }

    /// Row-vector GRU over plain `Vec`s, independent of the graph.
    fn plain_step(x: &[f64], h: &[f64], p: &GruParams) -> Vec<f64> {
        let d = h.len();
        let lin = |w: &Tensor, u: &Tensor, b: &Tensor, hv: &[f64], j: usize| {
            let mut s = b.get(0, j);
            for (i, xi) in x.iter().enumerate() {
                s += xi * w.get(i, j);
            }
            for (i, hi) in hv.iter().enumerate() {
                s += hi * u.get(i, j);
            }
            s
        };
        let z: Vec<f64> = (0..d)
            .map(|j| sig(lin(&p.w_z, &p.u_z, &p.b_z, h, j)))
            .collect();
        let r: Vec<f64> = (0..d)
            .map(|j| sig(lin(&p.w_r, &p.u_r, &p.b_r, h, j)))
            .collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let c: Vec<f64> = (0..d)
            .map(|j| lin(&p.w_h, &p.u_h, &p.b_h, &rh, j).tanh())
            .collect();
        (0..d).map(|j| (1.0 - z[j]) * h[j] + z[j] * c[j]).collect()
    }

    #[test]
    fn zero_params_zero_state_stays_zero() {
        let p = GruParams::zeros(3, 2);
        let h = gru_cell(
            &Tensor::row_vector(vec![1.0, -2.0, 0.5]),
            &Tensor::zeros(1, 2),
            &p,
        )
        .unwrap();
        assert_eq!(h, Tensor::zeros(1, 2));
    }

    #[test]
    fn scalar_cell_matches_hand_arithmetic() {
        let w = [0.3, -0.8, 1.1];
        let u = [0.5, 0.2, -0.7];
        let b = [0.1, -0.05, 0.2];
        let mut p = GruParams::zeros(1, 1);
        for (t, v) in [
            (&mut p.w_z, w[0]),
            (&mut p.w_r, w[1]),
            (&mut p.w_h, w[2]),
            (&mut p.u_z, u[0]),
            (&mut p.u_r, u[1]),
            (&mut p.u_h, u[2]),
            (&mut p.b_z, b[0]),
            (&mut p.b_r, b[1]),
            (&mut p.b_h, b[2]),
        ] {
            t.set(0, 0, v);
        }
        let out = gru_cell(&Tensor::scalar(0.9), &Tensor::scalar(-0.4), &p).unwrap();
        let want = scalar_gru(0.9, -0.4, w, u, b);
        assert!(
            (out.get(0, 0) - want).abs() < 1e-15,
            "{} vs {want}",
            out.get(0, 0)
        );
    }

    #[test]
    fn cell_shape_errors() {
        let p = GruParams::zeros(3, 2);
        assert!(gru_cell(&Tensor::zeros(1, 2), &Tensor::zeros(1, 2), &p).is_err());
        assert!(gru_cell(&Tensor::zeros(1, 3), &Tensor::zeros(1, 3), &p).is_err());
    }

    #[test]
    fn cell_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = GruParams::init(3, 2, &mut rng);
        let mut inputs: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
        // non-zero biases so their gradients are exercised away from zero
        for b in &mut inputs[6..] {
            *b = Tensor::uniform(1, 2, 0.5, &mut rng);
        }
        inputs.push(Tensor::uniform(1, 3, 2.0, &mut rng));
        inputs.push(Tensor::uniform(1, 2, 0.9, &mut rng));
        let err = grad_check(
            |g, xs| {
                let vars = GruVars {
                    w_z: xs[0],
                    w_r: xs[1],
                    w_h: xs[2],
                    u_z: xs[3],
                    u_r: xs[4],
                    u_h: xs[5],
                    b_z: xs[6],
                    b_r: xs[7],
                    b_h: xs[8],
                };
                let h = gru_cell_graph(g, xs[9], xs[10], &vars)?;
                let w = g.constant(Tensor::row_vector(vec![0.7, -1.3]));
                let hw = g.mul(h, w)?;
                Ok(g.sum(hw))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn single_step_bigru() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = BiGruParams::init(4, 3, &mut rng);
        let x = Tensor::uniform(1, 4, 1.0, &mut rng);
        let out = bigru(&x, &p).unwrap();
        let f = gru_cell(&x, &Tensor::zeros(1, 3), &p.forward).unwrap();
        let b = gru_cell(&x, &Tensor::zeros(1, 3), &p.backward).unwrap();
        assert_eq!(out, Tensor::concat_cols(&[&f, &b]).unwrap());
    }

    #[test]
    fn unrolled_oracle_u3_d2() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = BiGruParams::init(3, 2, &mut rng);
        let x = Tensor::uniform(3, 3, 1.5, &mut rng);
        let out = bigru(&x, &p).unwrap();

        let mut fwd = vec![vec![0.0; 2]; 3];
        let mut h = vec![0.0; 2];
        for (t, slot) in fwd.iter_mut().enumerate() {
            h = plain_step(x.row(t), &h, &p.forward);
            *slot = h.clone();
        }
        let mut bwd = vec![vec![0.0; 2]; 3];
        let mut h = vec![0.0; 2];
        for t in (0..3).rev() {
            h = plain_step(x.row(t), &h, &p.backward);
            bwd[t] = h.clone();
        }
        for t in 0..3 {
            let want: Vec<f64> = fwd[t].iter().chain(&bwd[t]).copied().collect();
            for (a, b) in out.row(t).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reversal_swaps_directions_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let fwd = GruParams::init(3, 4, &mut rng);
            let bwd = GruParams::init(3, 4, &mut rng);
            let x = Tensor::uniform(5, 3, 2.0, &mut rng);
            let p = BiGruParams {
                forward: fwd.clone(),
                backward: bwd.clone(),
            };
            let swapped = BiGruParams {
                forward: bwd,
                backward: fwd,
            };
            let out = bigru(&x, &p).unwrap();
            let rev = bigru(&x.reverse_rows(), &swapped).unwrap().reverse_rows();
            // halves trade places under reversal
            let want =
                Tensor::concat_cols(&[&rev.slice_cols(4, 8), &rev.slice_cols(0, 4)]).unwrap();
            assert_eq!(out, want);
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        let p = BiGruParams::init(2, 2, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(bigru(&Tensor::zeros(0, 2), &p).is_err());
        assert!(bigru(&Tensor::zeros(2, 3), &p).is_err());
    }

    #[test]
    fn bigru_gradient_check() {
        for (seed, u, d) in [(0u64, 1usize, 1usize), (1, 2, 3), (2, 4, 2), (3, 4, 3)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = BiGruParams::init(2, d, &mut rng);
            let mut inputs: Vec<Tensor> = p
                .forward
                .tensors()
                .into_iter()
                .chain(p.backward.tensors())
                .cloned()
                .collect();
            inputs.push(Tensor::uniform(u, 2, 2.0, &mut rng));
            let err = grad_check(
                |g, xs| {
                    let take = |o: usize| GruVars {
                        w_z: xs[o],
                        w_r: xs[o + 1],
                        w_h: xs[o + 2],
                        u_z: xs[o + 3],
                        u_r: xs[o + 4],
                        u_h: xs[o + 5],
                        b_z: xs[o + 6],
                        b_r: xs[o + 7],
                        b_h: xs[o + 8],
                    };
                    let vars = BiGruVars {
                        forward: take(0),
                        backward: take(9),
                    };
                    let out = bigru_graph(g, xs[18], &vars)?;
                    let t = g.tanh(out);
                    let sq = g.mul(t, out)?;
                    Ok(g.sum(sq))
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "u={u} d={d}: {err}");
        }
    }

    #[test]
    fn output_shape_is_u_by_2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for u in 1..6 {
            let p = BiGruParams::init(3, 5, &mut rng);
            let out = bigru(&Tensor::uniform(u, 3, 1.0, &mut rng), &p).unwrap();
            assert_eq!(out.shape(), (u, 10));
            assert!(out.is_finite());
        }
    }
}
