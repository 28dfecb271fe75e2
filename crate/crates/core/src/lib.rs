//! Latent class choice models for ranked stated-choice panels.

pub mod analysis;
pub mod builtin;
pub mod data;
pub mod design;
pub mod error;
pub mod estimation;
pub mod io;
pub mod likelihood;
pub mod optim;
pub mod schema;
pub mod simulate;
pub mod spec;
pub mod utility;
pub mod validate;

pub use data::{AltLabel, Alternative, ChoiceSituation, PanelDataset, RankingObservation, Respondent};
pub use error::{Error, Result};
pub use estimation::{fit, FitOptions, FitResult, FitStatus};
pub use likelihood::{ChoiceRule, PanelLikelihood};
pub use simulate::{simulate_dataset, SimulationConfig};
pub use schema::{AttributeSchema, Schema};
pub use spec::{ModelSpec, ParameterSpec, Role};

#[cfg(test)]
pub(crate) mod test_support {
    use crate::data::{AltLabel, Alternative, ChoiceSituation};
    use crate::schema::{CROWD, INFECT, IVT, WAIT};

    pub fn situation(c1: f64, w1: f64, c2: f64, w2: f64, infect: f64, ivt: f64) -> ChoiceSituation {
        let train = |label, c, w| Alternative::train(label, [(CROWD.to_string(), c), (WAIT.to_string(), w)]);
        ChoiceSituation {
            id: "s".into(),
            train1: train(AltLabel::Train1, c1, w1),
            train2: train(AltLabel::Train2, c2, w2),
            context: [(INFECT.to_string(), infect), (IVT.to_string(), ivt)].into_iter().collect(),
        }
    }
}
