//! Fused kernel for the diagonal input-dependent linear recurrence
//!
//! ```text
//! a_bar[t,d,s] = exp(delta[t,d] * a[d,s])
//! h[t,d,s]     = a_bar[t,d,s] * h[t-1,d,s] + delta[t,d] * b[t,s] * u[t,d]
//! y[t,d]       = sum_s c[t,s] * h[t,d,s] + d_skip[d] * u[t,d]
//! ```
//!
//! with `h[-1] = 0`. The forward pass keeps every state and decay factor so
//! the backward pass can run in one reverse sweep.

/// Borrowed operands of one scan; all buffers are dense row-major.
#[derive(Clone, Copy)]
pub struct ScanOperands<'a> {
    pub len: usize,
    pub width: usize,
    pub state: usize,
    /// `[len, width]`
    pub u: &'a [f64],
    /// `[len, width]`, positive step sizes
    pub delta: &'a [f64],
    /// `[width, state]`, negative continuous-time decay rates
    pub a: &'a [f64],
    /// `[len, state]`
    pub b: &'a [f64],
    /// `[len, state]`
    pub c: &'a [f64],
    /// `[width]`
    pub d_skip: &'a [f64],
}

/// Gradients of the scan with respect to each operand, same layouts.
pub struct ScanGrads {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d_skip: Vec<f64>,
}

/// States `h` and decay factors `a_bar`, both `[len, width, state]`.
#[derive(Debug)]
pub struct ScanTrace {
    pub states: Vec<f64>,
    pub decay: Vec<f64>,
}

/// Runs the recurrence, returning `y: [len, width]` and, if requested, the trace for backward.
pub fn scan_forward(op: ScanOperands<'_>, keep_states: bool) -> (Vec<f64>, Option<ScanTrace>) {
    let (l, dw, s) = (op.len, op.width, op.state);
    let mut y = vec![0.0; l * dw];
    let mut h = vec![0.0; dw * s];
    let mut trace = keep_states.then(|| ScanTrace {
        states: Vec::with_capacity(l * dw * s),
        decay: vec![0.0; l * dw * s],
    });
    for t in 0..l {
        let bt = &op.b[t * s..(t + 1) * s];
        let ct = &op.c[t * s..(t + 1) * s];
        for d in 0..dw {
            let dt = op.delta[t * dw + d];
            let ut = op.u[t * dw + d];
            let du = dt * ut;
            let ad = &op.a[d * s..(d + 1) * s];
            let hd = &mut h[d * s..(d + 1) * s];
            let mut acc = 0.0;
            match trace.as_mut() {
                Some(tr) => {
                    let dec = &mut tr.decay[(t * dw + d) * s..(t * dw + d + 1) * s];
                    for k in 0..s {
                        let a_bar = (dt * ad[k]).exp();
                        dec[k] = a_bar;
                        let hk = a_bar * hd[k] + du * bt[k];
                        hd[k] = hk;
                        acc += ct[k] * hk;
                    }
                }
                None => {
                    for k in 0..s {
                        let hk = (dt * ad[k]).exp() * hd[k] + du * bt[k];
                        hd[k] = hk;
                        acc += ct[k] * hk;
                    }
                }
            }
            y[t * dw + d] = acc + op.d_skip[d] * ut;
        }
        if let Some(tr) = trace.as_mut() {
            tr.states.extend_from_slice(&h);
        }
    }
    (y, trace)
}

/// Reverse sweep given the trace saved by [`scan_forward`] and the output gradient `gy`.
pub fn scan_backward(op: ScanOperands<'_>, trace: &ScanTrace, gy: &[f64]) -> ScanGrads {
    let states = &trace.states;
    let (l, dw, s) = (op.len, op.width, op.state);
    let mut g = ScanGrads {
        u: vec![0.0; l * dw],
        delta: vec![0.0; l * dw],
        a: vec![0.0; dw * s],
        b: vec![0.0; l * s],
        c: vec![0.0; l * s],
        d_skip: vec![0.0; dw],
    };
    // gradient flowing into h[t] from later positions, already multiplied by a_bar[t+1]
    let mut gh = vec![0.0; dw * s];
    for t in (0..l).rev() {
        let bt = &op.b[t * s..(t + 1) * s];
        let ct = &op.c[t * s..(t + 1) * s];
        let ht = &states[t * dw * s..(t + 1) * dw * s];
        let dec_t = &trace.decay[t * dw * s..(t + 1) * dw * s];
        for d in 0..dw {
            let idx = t * dw + d;
            let gyt = gy[idx];
            let dt = op.delta[idx];
            let ut = op.u[idx];
            let ad = &op.a[d * s..(d + 1) * s];
            let hd = &ht[d * s..(d + 1) * s];
            let ghd = &mut gh[d * s..(d + 1) * s];
            let mut g_delta = 0.0;
            let mut g_u = op.d_skip[d] * gyt;
            g.d_skip[d] += gyt * ut;
            for k in 0..s {
                g.c[t * s + k] += gyt * hd[k];
                let ghk = ghd[k] + ct[k] * gyt;
                let a_bar = dec_t[d * s + k];
                let h_prev = if t > 0 {
                    states[(t - 1) * dw * s + d * s + k]
                } else {
                    0.0
                };
                let g_abar = ghk * h_prev * a_bar;
                g_delta += g_abar * ad[k] + ghk * ut * bt[k];
                g.a[d * s + k] += g_abar * dt;
                g_u += ghk * dt * bt[k];
                g.b[t * s + k] += ghk * dt * ut;
                ghd[k] = ghk * a_bar;
            }
            g.delta[idx] += g_delta;
            g.u[idx] += g_u;
        }
    }
    g
}
