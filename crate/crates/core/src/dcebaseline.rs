//! Subtraction images from dynamic contrast-enhanced series.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::volio::{min_filter, Volume, MIN_KERNEL};

/// One pre-contrast volume and `m ≥ 1` post-contrast volumes.
#[derive(Clone, Debug)]
pub struct DceSeries {
    pre: Volume,
    post: Vec<Volume>,
}

impl DceSeries {
    pub fn new(pre: Volume, post: Vec<Volume>) -> Result<Self> {
        if post.is_empty() {
            bail!(Validation, "a DCE series needs at least one post-contrast volume");
        }
        if pre.channels() != 1 {
            bail!(Dimension, "pre-contrast volume has {} channels", pre.channels());
        }
        for (k, p) in post.iter().enumerate() {
            if p.channels() != 1 || p.dims() != pre.dims() || p.spacing() != pre.spacing() {
                bail!(
                    Dimension,
                    "post-contrast volume {k} ({}×{:?}) does not match pre-contrast {:?}",
                    p.channels(),
                    p.dims(),
                    pre.dims()
                );
            }
        }
        Ok(Self { pre, post })
    }

    /// Split a stacked volume: channel 0 is pre-contrast, the rest post.
    pub fn from_stacked(v: &Volume) -> Result<Self> {
        if v.channels() < 2 {
            bail!(Validation, "stacked DCE volume needs at least two channels");
        }
        let post = (1..v.channels())
            .map(|c| v.extract_channel(c))
            .collect::<Result<Vec<_>>>()?;
        Self::new(v.extract_channel(0)?, post)
    }

    pub fn to_stacked(&self) -> Result<Volume> {
        let mut parts = vec![self.pre.clone()];
        parts.extend(self.post.iter().cloned());
        Volume::stack(&parts)
    }

    pub fn pre(&self) -> &Volume {
        &self.pre
    }

    pub fn post(&self) -> &[Volume] {
        &self.post
    }
}

/// Where the 3×3×2 min filter is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterOrder {
    /// Once, to the mean of squared differences.
    #[default]
    FilterLast,
    /// To every squared-difference term before averaging.
    PerTerm,
}

/// `S = min_filter(mean_k (I_pre − I_post^k)²)` over the `m` post volumes.
///
/// The per-voxel terms are summed in sorted order, so `S` does not depend on
/// the order of the post-contrast list.
pub fn subtraction_image(series: &DceSeries, order: FilterOrder) -> Result<Volume> {
    let pre = series.pre();
    let mut terms = Vec::with_capacity(series.post.len());
    for p in series.post() {
        let mut t = pre.clone();
        for (a, b) in t.data_mut().iter_mut().zip(p.data()) {
            let d = *a - b;
            *a = d * d;
        }
        terms.push(match order {
            FilterOrder::FilterLast => t,
            FilterOrder::PerTerm => min_filter(&t, MIN_KERNEL)?,
        });
    }
    let m = terms.len() as f64;
    let mut mean = Volume::zeros(1, pre.dims(), pre.spacing())?;
    let mut buf = vec![0.0; terms.len()];
    for (v, out) in mean.data_mut().iter_mut().enumerate() {
        for (b, t) in buf.iter_mut().zip(&terms) {
            *b = t.data()[v];
        }
        buf.sort_by(f64::total_cmp);
        *out = buf.iter().sum::<f64>() / m;
    }
    match order {
        FilterOrder::FilterLast => min_filter(&mean, MIN_KERNEL),
        FilterOrder::PerTerm => Ok(mean),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f64) -> Volume {
        Volume::new(1, [4, 4, 2], [1.0; 3], vec![v; 32]).unwrap()
    }

    #[test]
    fn no_enhancement_gives_zero() {
        let s = DceSeries::new(constant(1.5), vec![constant(1.5), constant(1.5)]).unwrap();
        for o in [FilterOrder::FilterLast, FilterOrder::PerTerm] {
            assert!(subtraction_image(&s, o).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn constant_offset() {
        let s = DceSeries::new(constant(1.0), vec![constant(3.0)]).unwrap();
        assert!(subtraction_image(&s, FilterOrder::FilterLast)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 4.0));
    }

    #[test]
    fn shape_errors() {
        assert!(DceSeries::new(constant(1.0), vec![]).is_err());
        let other = Volume::zeros(1, [4, 4, 3], [1.0; 3]).unwrap();
        assert!(matches!(
            DceSeries::new(constant(1.0), vec![other]),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn stacked_round_trip() {
        let s = DceSeries::new(constant(1.0), vec![constant(2.0), constant(3.0)]).unwrap();
        let st = s.to_stacked().unwrap();
        assert_eq!(st.channels(), 3);
        let back = DceSeries::from_stacked(&st).unwrap();
        assert_eq!(back.post()[1], constant(3.0));
    }
}
