//! Exponential bucketing for numeric attributes.
//!
//! With precision `alpha` and `gamma = (1 + alpha) / (1 - alpha)`, a positive
//! value `d` lands in bucket `ceil(log_gamma(d))` covering `(gamma^(i-1), gamma^i]`;
//! bucket 0 covers `(0, 1]`. Zero and negative values get reserved buckets.

use serde::{Deserialize, Serialize};

pub fn gamma(alpha: f64) -> f64 {
    (1.0 + alpha) / (1.0 - alpha)
}

/// Bucket index of a positive value.
pub fn bucket_index(d: f64, alpha: f64) -> u32 {
    debug_assert!(d > 0.0 && alpha > 0.0 && alpha < 1.0);
    if d <= 1.0 {
        return 0;
    }
    let g = gamma(alpha);
    let mut i = (d.ln() / g.ln()).ceil().max(1.0) as i64;
    // log rounding can be off by one near bucket edges; settle on powi bounds
    while i > 1 && g.powi((i - 1) as i32) >= d {
        i -= 1;
    }
    while g.powi(i as i32) < d {
        i += 1;
    }
    i as u32
}

/// `(lower, upper]` of bucket `i`.
pub fn bucket_interval(i: u32, alpha: f64) -> (f64, f64) {
    if i == 0 {
        return (0.0, 1.0);
    }
    let g = gamma(alpha);
    (g.powi(i as i32 - 1), g.powi(i as i32))
}

/// Pattern side of a numeric attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NumericBucket {
    #[serde(rename = "neg")]
    Negative,
    #[serde(rename = "zero")]
    Zero,
    #[serde(rename = "b")]
    Positive(u32),
}

impl NumericBucket {
    pub fn of(d: f64, alpha: f64) -> NumericBucket {
        if d > 0.0 {
            NumericBucket::Positive(bucket_index(d, alpha))
        } else if d == 0.0 {
            NumericBucket::Zero
        } else {
            NumericBucket::Negative
        }
    }

    /// Human rendering used for approximate traces.
    pub fn render(&self, alpha: f64) -> String {
        match self {
            NumericBucket::Negative => "(-inf, 0)".into(),
            NumericBucket::Zero => "[0]".into(),
            NumericBucket::Positive(i) => {
                let (lo, hi) = bucket_interval(*i, alpha);
                format!("({}, {}]", crate::model::format_number(lo), crate::model::format_number(hi))
            }
        }
    }
}

/// Variable part of a numeric attribute.
#[derive(Debug, Clone, Copy)]
pub enum NumericParam {
    /// `value = lower + residual`, bit-exact.
    Residual(f64),
    /// Value stored as-is: reserved buckets, or when no residual reproduces
    /// the value exactly in floating point.
    Raw(f64),
}

impl PartialEq for NumericParam {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (NumericParam::Residual(a), NumericParam::Residual(b))
            | (NumericParam::Raw(a), NumericParam::Raw(b)) => a.to_bits() == b.to_bits(),
            _ => false,
        }
    }
}

impl NumericParam {
    /// The number a sampler should look at: the residual, or the raw value.
    pub fn magnitude(&self) -> f64 {
        match self {
            NumericParam::Residual(r) | NumericParam::Raw(r) => *r,
        }
    }
}

/// Splits `d` into its bucket and parameter.
pub fn encode(d: f64, alpha: f64) -> (NumericBucket, NumericParam) {
    let bucket = NumericBucket::of(d, alpha);
    let NumericBucket::Positive(i) = bucket else {
        return (bucket, NumericParam::Raw(d));
    };
    let lower = bucket_interval(i, alpha).0;
    let r = d - lower;
    if lower + r == d {
        return (bucket, NumericParam::Residual(r));
    }
    let (mut up, mut down) = (r, r);
    for _ in 0..32 {
        up = up.next_up();
        down = down.next_down();
        if lower + up == d {
            return (bucket, NumericParam::Residual(up));
        }
        if lower + down == d {
            return (bucket, NumericParam::Residual(down));
        }
    }
    (bucket, NumericParam::Raw(d))
}

pub fn decode(bucket: NumericBucket, param: NumericParam, alpha: f64) -> f64 {
    match (bucket, param) {
        (_, NumericParam::Raw(d)) => d,
        (NumericBucket::Positive(i), NumericParam::Residual(r)) => bucket_interval(i, alpha).0 + r,
        (_, NumericParam::Residual(r)) => r,
    }
}
