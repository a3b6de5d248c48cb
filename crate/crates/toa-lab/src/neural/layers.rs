//! Conv2D and fully connected layers with explicit backward passes.
//!
//! Activations use the height × width × channels layout, matching the
//! feature-map planes. Convolutions stride over (height, width) with
//! zero padding; weights are [kh, kw, c_in, c_out].

use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<S> {
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl<S: Scalar> Conv2d<S> {
    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape[0], self.weights.shape[1])
    }

    pub fn channels(&self) -> (usize, usize) {
        (self.weights.shape[2], self.weights.shape[3])
    }

    pub fn output_shape(&self, input: &[usize; 3]) -> [usize; 3] {
        let (kh, kw) = self.kernel();
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        [
            (input[0] + 2 * ph - kh) / sh + 1,
            (input[1] + 2 * pw - kw) / sw + 1,
            self.channels().1,
        ]
    }

    pub fn forward(&self, input: &Tensor<S>) -> Tensor<S> {
        let [ih, iw, ic] = [input.shape[0], input.shape[1], input.shape[2]];
        let (kh, kw) = self.kernel();
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let [oh, ow, oc] = self.output_shape(&[ih, iw, ic]);
        let mut out = Tensor::zeros(&[oh, ow, oc]);
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..oc {
                    let mut acc = self.bias.data[co];
                    for ky in 0..kh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy as usize >= ih {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix < 0 || ix as usize >= iw {
                                continue;
                            }
                            for ci in 0..ic {
                                let x = input.data[(iy as usize * iw + ix as usize) * ic + ci];
                                let w = self.weights.data[((ky * kw + kx) * ic + ci) * oc + co];
                                acc += x * w;
                            }
                        }
                    }
                    out.data[(oy * ow + ox) * oc + co] = acc;
                }
            }
        }
        out
    }

    /// Gradients wrt input, weights, and bias given the upstream gradient.
    pub fn backward(
        &self,
        input: &Tensor<S>,
        grad_out: &Tensor<S>,
    ) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
        let [ih, iw, ic] = [input.shape[0], input.shape[1], input.shape[2]];
        let (kh, kw) = self.kernel();
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let [oh, ow, oc] = [grad_out.shape[0], grad_out.shape[1], grad_out.shape[2]];
        let mut grad_in = Tensor::zeros(&[ih, iw, ic]);
        let mut grad_w = Tensor::zeros(&self.weights.shape);
        let mut grad_b = Tensor::zeros(&self.bias.shape);
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..oc {
                    let g = grad_out.data[(oy * ow + ox) * oc + co];
                    grad_b.data[co] += g;
                    for ky in 0..kh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy as usize >= ih {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix < 0 || ix as usize >= iw {
                                continue;
                            }
                            for ci in 0..ic {
                                let in_idx = (iy as usize * iw + ix as usize) * ic + ci;
                                let w_idx = ((ky * kw + kx) * ic + ci) * oc + co;
                                grad_w.data[w_idx] += input.data[in_idx] * g;
                                grad_in.data[in_idx] += self.weights.data[w_idx] * g;
                            }
                        }
                    }
                }
            }
        }
        (grad_in, grad_w, grad_b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<S> {
    /// [n_in, n_out]
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn n_in(&self) -> usize {
        self.weights.shape[0]
    }

    pub fn n_out(&self) -> usize {
        self.weights.shape[1]
    }

    pub fn forward(&self, input: &[S]) -> Vec<S> {
        let (n_in, n_out) = (self.n_in(), self.n_out());
        let mut out = self.bias.data.clone();
        for (i, &x) in input.iter().enumerate().take(n_in) {
            let row = &self.weights.data[i * n_out..(i + 1) * n_out];
            for (o, &w) in row.iter().enumerate() {
                out[o] += x * w;
            }
        }
        out
    }

    pub fn backward(
        &self,
        input: &[S],
        grad_out: &[S],
    ) -> (Vec<S>, Tensor<S>, Tensor<S>) {
        let (n_in, n_out) = (self.n_in(), self.n_out());
        let mut grad_in = vec![S::ZERO; n_in];
        let mut grad_w = Tensor::zeros(&self.weights.shape);
        let grad_b = Tensor::from_vec(&[n_out], grad_out.to_vec()).unwrap();
        for i in 0..n_in {
            let row = &self.weights.data[i * n_out..(i + 1) * n_out];
            let gw_row = &mut grad_w.data[i * n_out..(i + 1) * n_out];
            for o in 0..n_out {
                grad_in[i] += row[o] * grad_out[o];
                gw_row[o] += input[i] * grad_out[o];
            }
        }
        (grad_in, grad_w, grad_b)
    }
}

pub fn relu_in_place<S: Scalar>(values: &mut [S]) {
    for v in values.iter_mut() {
        if *v < S::ZERO {
            *v = S::ZERO;
        }
    }
}

/// Gradient through ReLU using the post-activation values.
pub fn relu_backward<S: Scalar>(activated: &[S], grad: &mut [S]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= S::ZERO {
            *g = S::ZERO;
        }
    }
}
