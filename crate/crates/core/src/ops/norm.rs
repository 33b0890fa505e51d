use crate::error::{config_err, shape_err, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

impl<'g> Var<'g> {
    /// Normalizes the channel vector at every spatial position, then applies
    /// the per-channel affine pair.
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let x = self.value();
        let (c, h, w) = x.dims3()?;
        if c < 2 {
            return Err(config_err!("layer_norm needs at least 2 channels, got {c}"));
        }
        let (gm, bt) = (gamma.value(), beta.value());
        if gm.shape() != [c] || bt.shape() != [c] {
            return Err(shape_err!(
                "layer_norm: affine shapes {:?}/{:?}, expected [{c}]",
                gm.shape(),
                bt.shape()
            ));
        }
        let p = h * w;
        let xd = x.data();
        let mut xhat = vec![0.0; c * p];
        let mut inv_std = vec![0.0; p];
        for i in 0..p {
            let mean = (0..c).map(|ch| xd[ch * p + i]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ch| (xd[ch * p + i] - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for ch in 0..c {
                xhat[ch * p + i] = (xd[ch * p + i] - mean) * is;
            }
        }
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            let (gv, bv) = (gm.data()[ch], bt.data()[ch]);
            for i in 0..p {
                out.data_mut()[ch * p + i] = xhat[ch * p + i] * gv + bv;
            }
        }
        Ok(self.graph.op(out, &[self, gamma, beta], move |g| {
            let gd = g.data();
            let mut dx = Tensor::zeros(&[c, h, w]);
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ch in 0..c {
                for i in 0..p {
                    dgamma[ch] += gd[ch * p + i] * xhat[ch * p + i];
                    dbeta[ch] += gd[ch * p + i];
                }
            }
            let dxd = dx.data_mut();
            for i in 0..p {
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for ch in 0..c {
                    let d = gd[ch * p + i] * gm.data()[ch];
                    mean_d += d;
                    mean_dx += d * xhat[ch * p + i];
                }
                mean_d /= c as f64;
                mean_dx /= c as f64;
                for ch in 0..c {
                    let d = gd[ch * p + i] * gm.data()[ch];
                    dxd[ch * p + i] = inv_std[i] * (d - mean_d - xhat[ch * p + i] * mean_dx);
                }
            }
            vec![
                dx,
                Tensor::from_vec(&[c], dgamma).unwrap(),
                Tensor::from_vec(&[c], dbeta).unwrap(),
            ]
        }))
    }
}
