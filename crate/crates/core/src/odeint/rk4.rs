use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::{DiffOdeSystem, OdeSystem};
use crate::error::{Error, Result};

/// One RK4 step per row: row `r` advances from `t[r]` by `h[r]`.
pub fn rk4_step<S: OdeSystem + ?Sized>(
    sys: &S,
    t: &[f64],
    h: &[f64],
    y: ArrayView2<f64>,
    rows: &[usize],
) -> Result<Array2<f64>> {
    let half: Vec<f64> = h.iter().map(|h| 0.5 * h).collect();
    let t_mid: Vec<f64> = t.iter().zip(&half).map(|(t, h)| t + h).collect();
    let t_end: Vec<f64> = t.iter().zip(h).map(|(t, h)| t + h).collect();
    let k1 = sys.rhs(t, y, rows)?;
    let k2 = sys.rhs(&t_mid, axpy_rows(&y, &half, &k1).view(), rows)?;
    let k3 = sys.rhs(&t_mid, axpy_rows(&y, &half, &k2).view(), rows)?;
    let k4 = sys.rhs(&t_end, axpy_rows(&y, h, &k3).view(), rows)?;
    let mut out = y.to_owned();
    for (r, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let c = h[r] / 6.0;
        for j in 0..row.len() {
            row[j] += c * (k1[[r, j]] + 2.0 * k2[[r, j]] + 2.0 * k3[[r, j]] + k4[[r, j]]);
        }
    }
    Ok(out)
}

/// `y + diag(c) * k`
fn axpy_rows(y: &ArrayView2<f64>, c: &[f64], k: &Array2<f64>) -> Array2<f64> {
    let mut out = y.to_owned();
    for (r, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        row.scaled_add(c[r], &k.row(r));
    }
    out
}

/// Reverse pass of [`rk4_step`]: recomputes the stages with tapes, pushes
/// the output cotangent back and returns the cotangent of `y`.
fn rk4_step_vjp<S: DiffOdeSystem + ?Sized>(
    sys: &S,
    t: &[f64],
    h: &[f64],
    y: ArrayView2<f64>,
    rows: &[usize],
    cot: &Array2<f64>,
    grad: &mut [f64],
) -> Result<Array2<f64>> {
    let half: Vec<f64> = h.iter().map(|h| 0.5 * h).collect();
    let t_mid: Vec<f64> = t.iter().zip(&half).map(|(t, h)| t + h).collect();
    let t_end: Vec<f64> = t.iter().zip(h).map(|(t, h)| t + h).collect();
    let (k1, tape1) = sys.rhs_taped(t, y, rows)?;
    let (k2, tape2) = sys.rhs_taped(&t_mid, axpy_rows(&y, &half, &k1).view(), rows)?;
    let (k3, tape3) = sys.rhs_taped(&t_mid, axpy_rows(&y, &half, &k2).view(), rows)?;
    let (_, tape4) = sys.rhs_taped(&t_end, axpy_rows(&y, h, &k3).view(), rows)?;

    let scale = |c: f64| -> Vec<f64> { h.iter().map(|h| h * c).collect() };
    let scale_rows = |a: &Array2<f64>, c: &[f64]| -> Array2<f64> {
        let mut out = a.clone();
        for (r, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            row *= c[r];
        }
        out
    };

    let mut cot_y = cot.clone();
    let cot_k4 = scale_rows(cot, &scale(1.0 / 6.0));
    let mut cot_k3 = scale_rows(cot, &scale(1.0 / 3.0));
    let mut cot_k2 = cot_k3.clone();
    let mut cot_k1 = cot_k4.clone();

    let u4 = sys.rhs_vjp(&tape4, cot_k4.view(), grad);
    cot_y += &u4;
    cot_k3 += &scale_rows(&u4, h);
    let u3 = sys.rhs_vjp(&tape3, cot_k3.view(), grad);
    cot_y += &u3;
    cot_k2 += &scale_rows(&u3, &half);
    let u2 = sys.rhs_vjp(&tape2, cot_k2.view(), grad);
    cot_y += &u2;
    cot_k1 += &scale_rows(&u2, &half);
    let u1 = sys.rhs_vjp(&tape1, cot_k1.view(), grad);
    cot_y += &u1;
    Ok(cot_y)
}

/// Where a requested save time lives on the integration grid.
#[derive(Debug, Clone, Copy)]
enum SaveSlot {
    /// Exactly on grid node `k`.
    Node(usize),
    /// Partial step of length `time - nodes[k]` from node `k`.
    Branch(usize),
}

/// A forward fixed-step RK4 solve kept in memory for a reverse pass.
///
/// The main trajectory steps on the uniform grid `t0 + k h` (plus a final
/// shorter step to the last requested time); each save time that falls
/// between two nodes is reached by a partial step branching off the
/// preceding node, so save requests never perturb the main trajectory.
/// Consequently a row's results do not depend on which other rows share
/// the batch.
#[derive(Debug, Clone)]
pub struct Rk4Trajectory {
    rows: Vec<usize>,
    nodes: Vec<f64>,
    node_states: Vec<Array2<f64>>,
    save_times: Vec<Vec<f64>>,
    slots: Vec<Vec<SaveSlot>>,
    saved: Vec<Vec<Array1<f64>>>,
}

impl Rk4Trajectory {
    /// `saves[r]` lists the (sorted) times at which row `r` is recorded.
    pub fn forward<S: OdeSystem + ?Sized>(
        sys: &S,
        y0: ArrayView2<f64>,
        rows: &[usize],
        t0: f64,
        step: f64,
        saves: &[Vec<f64>],
    ) -> Result<Self> {
        if !(step > 0.0) {
            return Err(Error::Invalid(format!("rk4 step size {step}")));
        }
        if saves.len() != rows.len() || y0.nrows() != rows.len() {
            return Err(Error::Dimension {
                what: "rk4 rows",
                expected: rows.len(),
                got: saves.len(),
            });
        }
        for s in saves {
            if s.windows(2).any(|w| w[1] < w[0]) || s.first().is_some_and(|&t| t < t0) {
                return Err(Error::Invalid("rk4 save times must be sorted and >= t0".into()));
            }
        }
        let t_end = saves.iter().filter_map(|s| s.last().copied()).fold(t0, f64::max);
        let nodes = grid(t0, t_end, step);
        let slots: Vec<Vec<SaveSlot>> = saves
            .iter()
            .map(|s| s.iter().map(|&t| locate(&nodes, t)).collect())
            .collect();

        let n_rows = rows.len();
        let mut node_states = Vec::with_capacity(nodes.len());
        node_states.push(y0.to_owned());
        for k in 0..nodes.len() - 1 {
            let h = nodes[k + 1] - nodes[k];
            let y = &node_states[k];
            let next = rk4_step(sys, &vec![nodes[k]; n_rows], &vec![h; n_rows], y.view(), rows)?;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Integration {
                    t: nodes[k + 1],
                    reason: "non-finite state".into(),
                });
            }
            node_states.push(next);
        }

        let mut saved: Vec<Vec<Array1<f64>>> = slots.iter().map(|s| vec![Array1::zeros(0); s.len()]).collect();
        for (r, row_slots) in slots.iter().enumerate() {
            for (i, slot) in row_slots.iter().enumerate() {
                if let SaveSlot::Node(k) = *slot {
                    saved[r][i] = node_states[k].row(r).to_owned();
                }
            }
        }
        // branch steps, batched per node across rows in rounds
        for (k, requests) in branch_requests(&slots).into_iter().enumerate() {
            for round in requests {
                let idx: Vec<usize> = round.iter().map(|&(r, _)| r).collect();
                let sub_rows: Vec<usize> = idx.iter().map(|&r| rows[r]).collect();
                let y = node_states[k].select(Axis(0), &idx);
                let t: Vec<f64> = vec![nodes[k]; idx.len()];
                let h: Vec<f64> = round.iter().map(|&(r, i)| saves[r][i] - nodes[k]).collect();
                let out = rk4_step(sys, &t, &h, y.view(), &sub_rows)?;
                if out.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Integration {
                        t: nodes[k] + h.iter().cloned().fold(0.0, f64::max),
                        reason: "non-finite state".into(),
                    });
                }
                for (j, &(r, i)) in round.iter().enumerate() {
                    saved[r][i] = out.row(j).to_owned();
                }
            }
        }
        Ok(Rk4Trajectory {
            rows: rows.to_vec(),
            nodes,
            node_states,
            save_times: saves.to_vec(),
            slots,
            saved,
        })
    }

    /// States recorded for row `r`, in the order of its save times.
    pub fn saved(&self, r: usize) -> &[Array1<f64>] {
        &self.saved[r]
    }

    pub fn n_steps(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Reverse pass. `cot[r][i]` is the loss cotangent of `saved(r)[i]`.
    /// Accumulates parameter gradients into `grad` and returns the
    /// cotangent of the initial state.
    pub fn backward<S: DiffOdeSystem + ?Sized>(
        &self,
        sys: &S,
        cot: &[Vec<Array1<f64>>],
        grad: &mut [f64],
    ) -> Result<Array2<f64>> {
        let n_rows = self.rows.len();
        let dim = self.node_states[0].ncols();
        let n_nodes = self.nodes.len();
        // cotangents landing directly on nodes
        let mut node_cot: Vec<Option<Array2<f64>>> = vec![None; n_nodes];
        for (r, row_slots) in self.slots.iter().enumerate() {
            for (i, slot) in row_slots.iter().enumerate() {
                if let SaveSlot::Node(k) = *slot {
                    let c = node_cot[k].get_or_insert_with(|| Array2::zeros((n_rows, dim)));
                    let mut row = c.row_mut(r);
                    row += &cot[r][i];
                }
            }
        }
        let branches = branch_requests(&self.slots);

        let mut adj = node_cot[n_nodes - 1]
            .take()
            .unwrap_or_else(|| Array2::zeros((n_rows, dim)));
        for k in (0..n_nodes).rev() {
            if k + 1 < n_nodes {
                let h = self.nodes[k + 1] - self.nodes[k];
                adj = rk4_step_vjp(
                    sys,
                    &vec![self.nodes[k]; n_rows],
                    &vec![h; n_rows],
                    self.node_states[k].view(),
                    &self.rows,
                    &adj,
                    grad,
                )?;
                if let Some(c) = node_cot[k].take() {
                    adj += &c;
                }
            }
            if let Some(requests) = branches.get(k) {
                for round in requests {
                    let idx: Vec<usize> = round.iter().map(|&(r, _)| r).collect();
                    let sub_rows: Vec<usize> = idx.iter().map(|&r| self.rows[r]).collect();
                    let y = self.node_states[k].select(Axis(0), &idx);
                    let t = vec![self.nodes[k]; idx.len()];
                    let h: Vec<f64> = round
                        .iter()
                        .map(|&(r, i)| self.save_times[r][i] - self.nodes[k])
                        .collect();
                    let mut c = Array2::zeros((idx.len(), dim));
                    for (j, &(r, i)) in round.iter().enumerate() {
                        c.row_mut(j).assign(&cot[r][i]);
                    }
                    if c.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let back = rk4_step_vjp(sys, &t, &h, y.view(), &sub_rows, &c, grad)?;
                    for (j, &r) in idx.iter().enumerate() {
                        let mut row = adj.row_mut(r);
                        row += &back.row(j);
                    }
                }
            }
        }
        Ok(adj)
    }
}

fn grid(t0: f64, t_end: f64, step: f64) -> Vec<f64> {
    let mut nodes = vec![t0];
    let span = t_end - t0;
    if span <= 0.0 {
        return nodes;
    }
    let tol = 1e-9 * step;
    let mut k = 1usize;
    loop {
        let t = t0 + k as f64 * step;
        if t >= t_end - tol {
            nodes.push(t_end);
            return nodes;
        }
        nodes.push(t);
        k += 1;
    }
}

fn locate(nodes: &[f64], t: f64) -> SaveSlot {
    // last node <= t
    let k = nodes.partition_point(|&n| n <= t).saturating_sub(1);
    let tol = 1e-12 * t.abs().max(1.0);
    if (nodes[k] - t).abs() <= tol {
        SaveSlot::Node(k)
    } else if k + 1 < nodes.len() && (nodes[k + 1] - t).abs() <= tol {
        SaveSlot::Node(k + 1)
    } else {
        SaveSlot::Branch(k)
    }
}

/// Groups branch saves by node; within a node, round `j` holds the `j`-th
/// branch save of every row that has one there.
fn branch_requests(slots: &[Vec<SaveSlot>]) -> Vec<Vec<Vec<(usize, usize)>>> {
    let n_nodes = slots
        .iter()
        .flatten()
        .map(|s| match *s {
            SaveSlot::Node(k) | SaveSlot::Branch(k) => k + 1,
        })
        .max()
        .unwrap_or(0);
    let mut out: Vec<Vec<Vec<(usize, usize)>>> = vec![Vec::new(); n_nodes];
    for (r, row_slots) in slots.iter().enumerate() {
        let mut per_node_count: Vec<(usize, usize)> = Vec::new();
        for (i, slot) in row_slots.iter().enumerate() {
            if let SaveSlot::Branch(k) = *slot {
                let round = match per_node_count.iter_mut().find(|(n, _)| *n == k) {
                    Some((_, c)) => {
                        *c += 1;
                        *c - 1
                    }
                    None => {
                        per_node_count.push((k, 1));
                        0
                    }
                };
                if out[k].len() <= round {
                    out[k].resize(round + 1, Vec::new());
                }
                out[k][round].push((r, i));
            }
        }
    }
    out
}
