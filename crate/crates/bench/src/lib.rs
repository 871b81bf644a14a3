//! Fixtures shared by the benchmarks.

use std::path::{Path, PathBuf};

use pbridge_core::bridge::ObservationSeries;
use pbridge_core::io::{read_flows, read_network};
use pbridge_core::sim::{make_scenario, Injection};
use pbridge_core::{FlowSeries, NetworkModel, Scenario};

pub struct Fixture {
    pub net: NetworkModel,
    pub flows: FlowSeries,
    pub scenario: Scenario,
    pub rho: ObservationSeries,
}

pub fn data_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

/// Noiseless readings from the bundled network `name` with `grams` injected
/// into `state`.
pub fn load(name: &str, state: &str, grams: f64) -> Fixture {
    let dir = data_dir(name);
    let net = read_network(&dir.join("network.json")).expect("network");
    let flows = read_flows(&dir.join("flows.csv"), &net, 1.0).expect("flows");
    let injection = Injection {
        states: vec![state.into()],
        grams,
    };
    let (scenario, rho) = make_scenario(&net, &flows, &injection, None).expect("scenario");
    Fixture {
        net,
        flows,
        scenario,
        rho,
    }
}

pub fn tank() -> Fixture {
    load("contaminated_tank", "tank:P1", 150.0)
}
