//! Static description of a conv stack, used for parameter counting and receptive-field arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphOp {
    Conv {
        kernel: usize,
        stride: usize,
        cin: usize,
        cout: usize,
    },
    /// 2x2 stride-2 max pooling; channel-preserving.
    MaxPool2x2,
}

/// Ordered list of parameterized ops.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpGraph {
    ops: Vec<GraphOp>,
}

/// Theoretical receptive field of the last op, measured in input pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RFSpec {
    pub receptive_field: usize,
    /// Product of strides: input pixels per output cell.
    pub stride: usize,
    /// Input-space position of the centre of output cell 0.
    pub offset: f64,
}

impl OpGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ops(ops: Vec<GraphOp>) -> Result<Self> {
        let g = OpGraph { ops };
        g.validate()?;
        Ok(g)
    }

    pub fn conv(mut self, kernel: usize, stride: usize, cin: usize, cout: usize) -> Self {
        self.ops.push(GraphOp::Conv {
            kernel,
            stride,
            cin,
            cout,
        });
        self
    }

    pub fn pool(mut self) -> Self {
        self.ops.push(GraphOp::MaxPool2x2);
        self
    }

    pub fn ops(&self) -> &[GraphOp] {
        &self.ops
    }

    /// Appends every op of `other`.
    pub fn then(mut self, other: &OpGraph) -> Self {
        self.ops.extend_from_slice(&other.ops);
        self
    }

    /// Adjacent convolutions (looking through pooling) must agree on channel counts.
    pub fn validate(&self) -> Result<()> {
        let mut channels: Option<usize> = None;
        for (i, op) in self.ops.iter().enumerate() {
            if let GraphOp::Conv {
                kernel,
                stride,
                cin,
                cout,
            } = *op
            {
                if kernel == 0 || stride == 0 || cin == 0 || cout == 0 {
                    return Err(Error::contract(format!("op {i}: zero-sized conv")));
                }
                if let Some(c) = channels {
                    if c != cin {
                        return Err(Error::contract(format!(
                            "op {i}: expects {cin} channels but previous op yields {c}"
                        )));
                    }
                }
                channels = Some(cout);
            }
        }
        Ok(())
    }

    /// Sum over convs of `k*k*cin*cout + cout`.
    pub fn count_parameters(&self) -> usize {
        self.ops
            .iter()
            .map(|op| match *op {
                GraphOp::Conv {
                    kernel, cin, cout, ..
                } => kernel * kernel * cin * cout + cout,
                GraphOp::MaxPool2x2 => 0,
            })
            .sum()
    }

    /// Kernel/stride recurrence: a conv grows the field by `(k - 1) * stride_product`; pooling
    /// only doubles the stride product. "Effective" receptive field here always means this
    /// theoretical value, not an empirical gradient-based one.
    pub fn receptive_field(&self) -> RFSpec {
        let mut rf = 1usize;
        let mut jump = 1usize;
        let mut offset = 0.0f64;
        for op in &self.ops {
            match *op {
                GraphOp::Conv { kernel, stride, .. } => {
                    rf += (kernel - 1) * jump;
                    jump *= stride;
                }
                GraphOp::MaxPool2x2 => {
                    offset += 0.5 * jump as f64;
                    jump *= 2;
                }
            }
        }
        RFSpec {
            receptive_field: rf,
            stride: jump,
            offset,
        }
    }
}
