//! Per-slot parameter accounting, cross-checked against the live model.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, PoolPreset, Role};
use crate::optim::{OptimConfig, Optimizer};
use crate::perceptron::{MlpPoolStack, PerceptronSpec, SharingMode};
use crate::tensor::Shape4;

#[derive(Debug, Clone, PartialEq)]
pub struct SlotRow {
    pub role: Role,
    pub input: Shape4,
    pub output: Shape4,
    /// Parameters counted on the constructed layers.
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub model: ModelConfig,
    pub slots: Vec<SlotRow>,
    pub pooling_total: usize,
    pub model_total: usize,
    /// Scalars registered with an optimizer built over the model.
    pub registered_total: usize,
}

impl AuditReport {
    /// Parameters outside the pooling slots.
    pub fn other_total(&self) -> usize {
        self.model_total - self.pooling_total
    }

    pub fn role_total(&self, role: Role) -> usize {
        self.slots.iter().filter(|r| r.role == role).map(|r| r.params).sum()
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "model {}, pooling {}",
            self.model.arch.name(),
            self.model.pooling.name()
        )?;
        writeln!(f, "{:<10} {:>16} {:>16} {:>12}", "slot", "input", "output", "params")?;
        for r in &self.slots {
            let dims = |s: Shape4| format!("{}x{}x{}", s.channels, s.height, s.width);
            writeln!(
                f,
                "{:<10} {:>16} {:>16} {:>12}",
                r.role.to_string(),
                dims(r.input),
                dims(r.output),
                r.params
            )?;
        }
        writeln!(f, "pooling total {}", self.pooling_total)?;
        writeln!(f, "other layers  {}", self.other_total())?;
        write!(
            f,
            "model total   {} (optimizer holds {})",
            self.model_total, self.registered_total
        )
    }
}

/// Closed-form parameter count of one pooling slot fed `input`.
pub fn slot_formula(preset: PoolPreset, base: &PerceptronSpec, input: Shape4) -> Result<usize> {
    let shared = |sharing: SharingMode| {
        PerceptronSpec {
            sharing,
            ..base.clone()
        }
        .pool_param_count(input)
    };
    match preset {
        PoolPreset::Max | PoolPreset::Average => Ok(0),
        PoolPreset::StridedConv => Ok(input.channels * input.channels * 4 + input.channels),
        PoolPreset::Perceptron => base.pool_param_count(input),
        PoolPreset::NnZ => shared(SharingMode::PerChannel),
        PoolPreset::NnField => shared(SharingMode::PerField),
        PoolPreset::NnTensor => shared(SharingMode::PerTensor),
        PoolPreset::Nn4_1 | PoolPreset::Nn16_1 => {
            let hidden = if preset == PoolPreset::Nn4_1 { 4 } else { 16 };
            let mut shape = input;
            let mut total = 0;
            for spec in MlpPoolStack::<f32>::nn_specs(hidden, base)? {
                total += spec.pool_param_count(shape)?;
                shape = spec.pool_output_shape(shape)?;
            }
            Ok(total)
        }
    }
}

/// Builds the model and tabulates the parameters of every pooling slot, the
/// optional upsampling and GAP stages, and the whole network. Fails if the
/// constructed layers disagree with the closed-form slot counts or if the
/// optimizer would not see every parameter.
pub fn audit_params(model: &ModelConfig, classes: usize) -> Result<AuditReport> {
    let net = build_model::<f32>(model, classes, 0)?;
    let shapes = net.shapes(model.input_shape(1))?;
    let mut slots: Vec<SlotRow> = Vec::new();
    for (i, b) in net.blocks().iter().enumerate() {
        if matches!(b.role, Role::Backbone | Role::Head) {
            continue;
        }
        let params = b.layer.param_count();
        match slots.last_mut() {
            Some(row) if row.role == b.role => {
                row.params += params;
                row.output = shapes[i + 1];
            }
            _ => slots.push(SlotRow {
                role: b.role,
                input: shapes[i],
                output: shapes[i + 1],
                params,
            }),
        }
    }
    for row in &slots {
        if let Role::Pool(s) = row.role {
            let expected = slot_formula(model.pooling, &model.perceptron, row.input)?;
            if expected != row.params {
                return Err(Error::config(format!(
                    "pooling slot {s}: layers hold {} parameters, formula gives {expected}",
                    row.params
                )));
            }
        }
    }
    let pooling_total = slots
        .iter()
        .filter(|r| matches!(r.role, Role::Pool(_)))
        .map(|r| r.params)
        .sum();
    let model_total = net.param_count();
    let registered_total = Optimizer::new(OptimConfig::default(), &net.params()).registered_len();
    if registered_total != model_total {
        return Err(Error::config(format!(
            "optimizer registers {registered_total} parameters, model holds {model_total}"
        )));
    }
    Ok(AuditReport {
        model: model.clone(),
        slots,
        pooling_total,
        model_total,
        registered_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, HeadKind};

    fn pooling(arch: Arch, preset: PoolPreset) -> usize {
        audit_params(&ModelConfig::new(arch, preset), 10).unwrap().pooling_total
    }

    #[test]
    fn model_a_like_slots() {
        assert_eq!(pooling(Arch::ModelALike, PoolPreset::Perceptron), 10);
        assert_eq!(pooling(Arch::ModelALike, PoolPreset::Nn4_1), 50);
        assert_eq!(pooling(Arch::ModelALike, PoolPreset::NnField), 1600);
        assert_eq!(pooling(Arch::ModelALike, PoolPreset::NnTensor), 122_880);
        assert_eq!(pooling(Arch::ModelALike, PoolPreset::NnZ), 960);
        assert_eq!(pooling(Arch::ModelALike, PoolPreset::Nn16_1), 194);
        assert_eq!(pooling(Arch::ModelALike, PoolPreset::Max), 0);
    }

    #[test]
    fn rows_and_totals_agree() {
        let mut cfg = ModelConfig::new(Arch::ModelALike, PoolPreset::StridedConv);
        cfg.head = HeadKind::GapPerceptron;
        let r = audit_params(&cfg, 10).unwrap();
        assert_eq!(r.pooling_total, 82_112);
        assert_eq!(r.role_total(Role::Gap), 65);
        assert_eq!(r.slots[0].input, Shape4::new(1, 64, 32, 32));
        assert_eq!(r.slots[1].output, Shape4::new(1, 128, 8, 8));
        assert_eq!(r.registered_total, r.model_total);
        let text = r.to_string();
        assert!(text.contains("pool1") && text.contains("82112"), "{text}");
    }

    #[test]
    fn formula_matches_on_odd_inputs() {
        let base = PerceptronSpec::default();
        let s = Shape4::new(1, 7, 12, 20);
        assert_eq!(slot_formula(PoolPreset::NnZ, &base, s).unwrap(), 35);
        assert_eq!(slot_formula(PoolPreset::NnField, &base, s).unwrap(), 6 * 10 * 5);
        assert_eq!(slot_formula(PoolPreset::StridedConv, &base, s).unwrap(), 7 * 7 * 4 + 7);
    }
}
