use std::fmt::Write as _;

use super::{bcov, e_cons, foi_fmi, hd95, iou_dice, jsd, leak, spearman, Consistency};
use crate::attribution::FocusField;
use crate::config::sig9;
use crate::error::Result;
use crate::fields::{binarize, Field2D, Mask2D, MaskStack};

pub const COLUMNS: &str = "slice_id,jsd,foi,fmi,leak_phi,leak_p,bcov_r,iou,dice,hd95_px,flags";

/// Indices for one slice: probabilities `p`, raw attribution `phi`, truth `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceProbe {
    pub slice_id: String,
    pub jsd: f64,
    pub foi: f64,
    pub fmi: f64,
    pub leak_phi: f64,
    pub leak_p: f64,
    pub bcov_r: f64,
    pub iou: f64,
    pub dice: f64,
    pub hd95_px: f64,
    pub flags: Vec<&'static str>,
}

impl SliceProbe {
    pub fn compute(slice_id: impl Into<String>, p: &Field2D, phi: &Field2D, y: &Mask2D, r: usize, eps: f64) -> Result<Self> {
        let mut flags = Vec::new();
        let (pt, p_deg) = FocusField::normalize(p, eps)?;
        let (ft, f_deg) = FocusField::normalize(phi, eps)?;
        if p_deg {
            flags.push("p_degenerate");
        }
        let overlap = foi_fmi(phi, y, eps)?;
        if f_deg || overlap.degenerate {
            flags.push("phi_degenerate");
        }
        let pred = binarize(p, 0.5);
        let o = iou_dice(&pred, y)?;
        if o.both_empty {
            flags.push("both_empty");
        }
        let h = hd95(&pred, y)?;
        if h.one_empty {
            flags.push("hd95_sentinel");
        }
        Ok(Self {
            slice_id: slice_id.into(),
            jsd: jsd(&pt, &ft)?,
            foi: overlap.foi,
            fmi: overlap.fmi,
            leak_phi: leak(phi, y, eps)?,
            leak_p: leak(p, y, eps)?,
            bcov_r: bcov(phi, y, r, eps)?,
            iou: o.iou,
            dice: o.dice,
            hd95_px: h.value,
            flags,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub r: usize,
    pub slices: Vec<SliceProbe>,
    /// Per stack (volume id, consistency over its binarized predictions).
    pub stacks: Vec<(String, Consistency)>,
    pub spearman_jsd_err: Option<f64>,
    pub spearman_fmi_err: Option<f64>,
}

impl ProbeReport {
    pub fn new(r: usize) -> Self {
        Self {
            r,
            slices: Vec::new(),
            stacks: Vec::new(),
            spearman_jsd_err: None,
            spearman_fmi_err: None,
        }
    }

    pub fn push_stack(&mut self, id: impl Into<String>, preds: &MaskStack) -> Result<()> {
        self.stacks.push((id.into(), e_cons(preds)?));
        Ok(())
    }

    /// Computes the two rank correlations. They stay `None` when undefined
    /// (fewer than two slices or a constant column).
    pub fn finish(&mut self) {
        let jsds: Vec<f64> = self.slices.iter().map(|s| s.jsd).collect();
        let iou_err: Vec<f64> = self.slices.iter().map(|s| 1.0 - s.iou).collect();
        let fmis: Vec<f64> = self.slices.iter().map(|s| s.fmi).collect();
        let dice_err: Vec<f64> = self.slices.iter().map(|s| 1.0 - s.dice).collect();
        self.spearman_jsd_err = spearman(&jsds, &iou_err).ok();
        self.spearman_fmi_err = spearman(&fmis, &dice_err).ok();
    }

    pub fn mean_e_cons(&self) -> Option<f64> {
        let valid: Vec<f64> = self
            .stacks
            .iter()
            .filter(|(_, c)| c.valid_pairs > 0)
            .map(|(_, c)| c.e_cons)
            .collect();
        (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64)
    }

    pub fn to_csv(&self, preamble: &str) -> String {
        let mut s = String::from(preamble);
        let _ = writeln!(s, "# r={}", self.r);
        let _ = writeln!(s, "{COLUMNS}");
        for p in &self.slices {
            let vals = [p.jsd, p.foi, p.fmi, p.leak_phi, p.leak_p, p.bcov_r, p.iou, p.dice, p.hd95_px];
            let nums: Vec<String> = vals.iter().map(|&v| sig9(v)).collect();
            let _ = writeln!(s, "{},{},{}", p.slice_id, nums.join(","), p.flags.join("|"));
        }
        let _ = writeln!(s, "# footer");
        let _ = writeln!(s, "stack_id,e_cons,valid_pairs,excluded_pairs");
        for (id, c) in &self.stacks {
            let _ = writeln!(s, "{id},{},{},{}", sig9(c.e_cons), c.valid_pairs, c.excluded_pairs);
        }
        for (name, v) in [
            ("spearman_jsd_err", self.spearman_jsd_err),
            ("spearman_fmi_err", self.spearman_fmi_err),
        ] {
            match v {
                Some(v) => {
                    let _ = writeln!(s, "{name},{}", sig9(v));
                }
                None => {
                    let _ = writeln!(s, "# {name} absent: undefined_for_input");
                }
            }
        }
        s
    }
}
