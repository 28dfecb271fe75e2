//! Shared fixtures for the benchmarks.

use lccmkit::simulate::{simulate_dataset, SimulationConfig};
use lccmkit::{builtin, ModelSpec, PanelDataset};

/// The published two-class model and a panel simulated from it.
pub fn paper_fixture(n_respondents: usize) -> (ModelSpec, PanelDataset) {
    let generator = builtin::paper_2class_table3();
    let config = SimulationConfig {
        n_respondents,
        seed: 1,
        ..Default::default()
    };
    let data = simulate_dataset(&generator, &config).expect("simulation").dataset;
    (generator, data)
}
