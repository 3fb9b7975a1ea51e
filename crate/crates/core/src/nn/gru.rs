use rand::Rng;

use super::layers::{check_cols, sigmoid, LayerSpec, Param, Parameterized};
use super::mat::{gemm, vec_mat_acc, Mat};
use super::NnError;

/// Gated recurrent unit run over a sequence from a zero initial state.
///
/// Gate blocks are ordered reset, update, candidate:
/// `n = tanh(x Wn + bn + r * (h Un + cn))`, `h' = (1 - z) * n + z * h`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub wx: Param,
    pub wh: Param,
    pub bx: Param,
    pub bh: Param,
}

#[derive(Debug, Clone)]
pub struct GruCache {
    x: Mat,
    h_prev: Mat,
    r: Mat,
    z: Mat,
    n: Mat,
    ah_n: Mat,
}

impl GruCell {
    pub fn new(name: &str, in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (hidden as f64).sqrt();
        Self {
            wx: Param::uniform(format!("{name}.wx"), &[in_dim, 3 * hidden], scale, rng),
            wh: Param::uniform(format!("{name}.wh"), &[hidden, 3 * hidden], scale, rng),
            bx: Param::uniform(format!("{name}.bx"), &[3 * hidden], scale, rng),
            bh: Param::uniform(format!("{name}.bh"), &[3 * hidden], scale, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.wx.shape[0]
    }

    pub fn hidden(&self) -> usize {
        self.wh.shape[0]
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::gru(self.in_dim(), self.hidden())
    }

    pub fn forward(&self, x: &Mat) -> Result<(Mat, GruCache), NnError> {
        check_cols(x, self.in_dim(), &self.wx.name)?;
        let h = self.hidden();
        let t_len = x.rows;
        let mut ax = Mat::zeros(t_len, 3 * h);
        for r in 0..t_len {
            ax.row_mut(r).copy_from_slice(&self.bx.values);
        }
        let wx = Mat::from_vec(self.in_dim(), 3 * h, self.wx.values.clone());
        gemm(1.0, x, false, &wx, false, 1.0, &mut ax);

        let mut out = Mat::zeros(t_len, h);
        let mut cache = GruCache {
            x: x.clone(),
            h_prev: Mat::zeros(t_len, h),
            r: Mat::zeros(t_len, h),
            z: Mat::zeros(t_len, h),
            n: Mat::zeros(t_len, h),
            ah_n: Mat::zeros(t_len, h),
        };
        let mut state = vec![0.0; h];
        let mut ah = vec![0.0; 3 * h];
        for t in 0..t_len {
            ah.copy_from_slice(&self.bh.values);
            vec_mat_acc(&state, &self.wh.values, &mut ah);
            let a = ax.row(t);
            cache.h_prev.row_mut(t).copy_from_slice(&state);
            for j in 0..h {
                let r = sigmoid(a[j] + ah[j]);
                let z = sigmoid(a[h + j] + ah[h + j]);
                let n = (a[2 * h + j] + r * ah[2 * h + j]).tanh();
                cache.r.row_mut(t)[j] = r;
                cache.z.row_mut(t)[j] = z;
                cache.n.row_mut(t)[j] = n;
                cache.ah_n.row_mut(t)[j] = ah[2 * h + j];
                state[j] = (1.0 - z) * n + z * state[j];
            }
            out.row_mut(t).copy_from_slice(&state);
        }
        Ok((out, cache))
    }

    /// Backpropagation through time; returns the input gradient.
    pub fn backward(&mut self, cache: &GruCache, gy: &Mat) -> Mat {
        let h = self.hidden();
        let t_len = gy.rows;
        let mut dax = Mat::zeros(t_len, 3 * h);
        let mut dah = Mat::zeros(t_len, 3 * h);
        let mut carry = vec![0.0; h];
        for t in (0..t_len).rev() {
            let (r, z, n, ahn, hp) =
                (cache.r.row(t), cache.z.row(t), cache.n.row(t), cache.ah_n.row(t), cache.h_prev.row(t));
            let mut dhp = vec![0.0; h];
            for j in 0..h {
                let dh = gy.row(t)[j] + carry[j];
                let dn = dh * (1.0 - z[j]);
                let dz = dh * (hp[j] - n[j]);
                dhp[j] = dh * z[j];
                let dan = dn * (1.0 - n[j] * n[j]);
                let dr = dan * ahn[j];
                let dar = dr * r[j] * (1.0 - r[j]);
                let daz = dz * z[j] * (1.0 - z[j]);
                let row = dax.row_mut(t);
                row[j] = dar;
                row[h + j] = daz;
                row[2 * h + j] = dan;
                let row = dah.row_mut(t);
                row[j] = dar;
                row[h + j] = daz;
                row[2 * h + j] = dan * r[j];
            }
            // dhp += dah_t Wh^T
            let wh = &self.wh.values;
            let g = dah.row(t);
            for (i, d) in dhp.iter_mut().enumerate() {
                let wrow = &wh[i * 3 * h..(i + 1) * 3 * h];
                *d += wrow.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
            }
            carry = dhp;
        }
        let mut gwx = Mat::from_vec(self.in_dim(), 3 * h, std::mem::take(&mut self.wx.grad));
        gemm(1.0, &cache.x, true, &dax, false, 1.0, &mut gwx);
        self.wx.grad = gwx.data;
        let mut gwh = Mat::from_vec(h, 3 * h, std::mem::take(&mut self.wh.grad));
        gemm(1.0, &cache.h_prev, true, &dah, false, 1.0, &mut gwh);
        self.wh.grad = gwh.data;
        for t in 0..t_len {
            self.bx.grad.iter_mut().zip(dax.row(t)).for_each(|(g, v)| *g += v);
            self.bh.grad.iter_mut().zip(dah.row(t)).for_each(|(g, v)| *g += v);
        }
        let wx = Mat::from_vec(self.in_dim(), 3 * h, self.wx.values.clone());
        let mut gx = Mat::zeros(t_len, self.in_dim());
        gemm(1.0, &dax, false, &wx, true, 0.0, &mut gx);
        gx
    }
}

impl Parameterized for GruCell {
    fn params(&self) -> Vec<&Param> {
        vec![&self.wx, &self.wh, &self.bx, &self.bh]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.wx, &mut self.wh, &mut self.bx, &mut self.bh]
    }
}
