use super::{DoseModel, MlpScoreModel, NoiseSchedule, Standardizer};
use crate::checkpoint::{Checkpoint, CheckpointError};

fn invalid(key: &str, e: impl ToString) -> CheckpointError {
    CheckpointError::Invalid { key: key.to_string(), reason: e.to_string() }
}

impl MlpScoreModel {
    pub const CHECKPOINT_KIND: &'static str = "score";

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(Self::CHECKPOINT_KIND);
        ck.set("dim", self.standardizer().dim());
        ck.set_array("sigmas", self.schedule_ref().sigmas());
        ck.set_array("standardizer.mean", &self.standardizer().mean);
        ck.set_array("standardizer.scale", &self.standardizer().scale);
        ck.put_mlp("net", self.net());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        ck.expect_kind(Self::CHECKPOINT_KIND)?;
        let schedule = NoiseSchedule::from_sigmas(ck.array("sigmas")?.to_vec()).map_err(|e| invalid("sigmas", e))?;
        let standardizer = Standardizer {
            mean: ck.array("standardizer.mean")?.to_vec(),
            scale: ck.array("standardizer.scale")?.to_vec(),
        };
        let net = ck.take_mlp("net")?;
        MlpScoreModel::from_parts(net, schedule, standardizer).map_err(|e| invalid("net", e))
    }
}

impl DoseModel {
    pub const CHECKPOINT_KIND: &'static str = "dose";

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(Self::CHECKPOINT_KIND);
        ck.set("dim", self.dim());
        ck.set("levels", self.levels());
        ck.set_array("norm.mean", &self.normalizer().mean);
        ck.set_array("norm.scale", &self.normalizer().scale);
        let degenerate: Vec<f64> = self.degenerate().iter().map(|d| d.unwrap_or(f64::NAN)).collect();
        ck.set_array("degenerate", &degenerate);
        ck.put_mlp("net", self.net());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        ck.expect_kind(Self::CHECKPOINT_KIND)?;
        let dim: usize = ck.parse("dim")?;
        let norm = Standardizer { mean: ck.array("norm.mean")?.to_vec(), scale: ck.array("norm.scale")?.to_vec() };
        let degenerate = ck.array("degenerate")?.iter().map(|&v| if v.is_nan() { None } else { Some(v) }).collect();
        let net = ck.take_mlp("net")?;
        DoseModel::from_parts(net, dim, norm, degenerate).map_err(|e| invalid("net", e))
    }
}
