//! The OSACA milling constellation: a physical machine shell, a geometry
//! correction service shell and a simulation model shell. Position updates on
//! the machine are propagated, compensated, to the simulation model.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::Serialize;
use thiserror::Error;

use crate::clock::ManualClock;
use crate::engine::{BehaviorContext, BehaviorOutcome, SimulatedEngine};
use crate::events::LifecycleEvent;
use crate::instance::{InstanceId, Transition};
use crate::model::{AasId, AssetAdministrationShell, ElementReference, IdShort, Submodel, SubmodelElement, Value};
use crate::package::{AasxPackage, ServiceContextEntry};
use crate::runtime::{Runtime, RuntimeError};
use crate::service_execution::{ContextRef, ExecutionTrigger, ReactivationPolicy, ServiceExecutionSpec};

pub const CPS_SHELL: &str = "urn:osaca:aas:cps";
pub const TRANSFORMATION_SHELL: &str = "urn:osaca:aas:transformation";
pub const SIMULATION_SHELL: &str = "urn:osaca:aas:simulation";
pub const CPS_SUBMODEL: &str = "urn:osaca:sm:cps";
pub const CORRECTION_SUBMODEL: &str = "urn:osaca:sm:geometry-correction";
pub const SIMULATION_SUBMODEL: &str = "urn:osaca:sm:simulation";
pub const SERVICE_ID: &str = "geometry_correction";
pub const CONTEXT_VERSION: &str = "1.0.0";

pub const CONTAINERFILE: &str = include_str!("Containerfile");
pub const COMPENSATE_PY: &str = include_str!("compensate.py");

/// Offsets shipped with the example package.
pub const DEFAULT_DELTA: CompensationModel = CompensationModel {
    dx: 0.02,
    dy: -0.01,
    dz: 0.005,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0} is not finite")]
pub struct NonFinite(pub &'static str);

/// Tool position in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    fn check(&self) -> Result<(), NonFinite> {
        for (name, v) in [("x", self.x), ("y", self.y), ("z", self.z)] {
            if !v.is_finite() {
                return Err(NonFinite(name));
            }
        }
        Ok(())
    }
}

/// Constant per-axis offset between measured and modelled position, in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompensationModel {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl CompensationModel {
    pub const ZERO: CompensationModel = CompensationModel {
        dx: 0.0,
        dy: 0.0,
        dz: 0.0,
    };

    pub fn negated(self) -> Self {
        Self {
            dx: -self.dx,
            dy: -self.dy,
            dz: -self.dz,
        }
    }
}

pub fn compensate(p: Position, m: CompensationModel) -> Result<Position, NonFinite> {
    p.check()?;
    for (name, v) in [("dx", m.dx), ("dy", m.dy), ("dz", m.dz)] {
        if !v.is_finite() {
            return Err(NonFinite(name));
        }
    }
    Ok(Position::new(p.x + m.dx, p.y + m.dy, p.z + m.dz))
}

fn aas(s: &str) -> AasId {
    AasId::new(s).expect("constant id")
}

fn short(s: &str) -> IdShort {
    IdShort::new(s).expect("constant idShort")
}

fn position_collection(p: Position) -> SubmodelElement {
    SubmodelElement::collection(
        "Position",
        vec![
            SubmodelElement::property("X", Value::Double(p.x)).expect("constant idShort"),
            SubmodelElement::property("Y", Value::Double(p.y)).expect("constant idShort"),
            SubmodelElement::property("Z", Value::Double(p.z)).expect("constant idShort"),
        ],
    )
    .expect("constant idShort")
}

pub fn cps_position() -> ElementReference {
    ElementReference::from_dotted(aas(CPS_SUBMODEL), "Position").expect("constant path")
}

pub fn simulation_position() -> ElementReference {
    ElementReference::from_dotted(aas(SIMULATION_SUBMODEL), "Position").expect("constant path")
}

pub fn build_context() -> ServiceContextEntry {
    ServiceContextEntry::new(
        short(SERVICE_ID),
        CONTEXT_VERSION,
        CONTAINERFILE.as_bytes().to_vec(),
        BTreeMap::from([("compensate.py".to_string(), COMPENSATE_PY.as_bytes().to_vec())]),
    )
}

pub fn correction_spec(delta: CompensationModel, reactivation: ReactivationPolicy) -> ServiceExecutionSpec {
    ServiceExecutionSpec::new(
        short(SERVICE_ID),
        ContextRef::Package {
            service_ref: short(SERVICE_ID),
            content_hash: Some(build_context().content_hash),
        },
        [ExecutionTrigger::OnUpdate],
    )
    .with_input("POSITION", cps_position())
    .with_output("POSITION", simulation_position())
    .with_env("DELTA_X", delta.dx.to_string())
    .with_env("DELTA_Y", delta.dy.to_string())
    .with_env("DELTA_Z", delta.dz.to_string())
    .with_reactivation(reactivation)
}

/// The example package with the shipped offsets.
pub fn build_case_study_package() -> AasxPackage {
    build_case_study_package_with(DEFAULT_DELTA, ReactivationPolicy::Restart)
}

pub fn build_case_study_package_with(delta: CompensationModel, reactivation: ReactivationPolicy) -> AasxPackage {
    let origin = Position::new(0.0, 0.0, 0.0);
    let cps = Submodel::new(aas(CPS_SUBMODEL), short("OSACA_CPS")).with_element(position_collection(origin));
    let simulation =
        Submodel::new(aas(SIMULATION_SUBMODEL), short("OSACA_Simulation")).with_element(position_collection(origin));
    let correction = correction_spec(delta, reactivation).to_submodel(aas(CORRECTION_SUBMODEL), short("GeometryCorrection"));

    let mut pkg = AasxPackage::new();
    pkg.add_shell(AssetAdministrationShell::new(aas(CPS_SHELL), short("OSACA_CPS_AAS")).with_submodel(aas(CPS_SUBMODEL)))
        .add_shell(
            AssetAdministrationShell::new(aas(TRANSFORMATION_SHELL), short("OSACA_Transformation_AAS"))
                .with_submodel(aas(CORRECTION_SUBMODEL)),
        )
        .add_shell(
            AssetAdministrationShell::new(aas(SIMULATION_SHELL), short("OSACA_Simulation_AAS"))
                .with_submodel(aas(SIMULATION_SUBMODEL)),
        )
        .add_submodel(cps)
        .add_submodel(correction)
        .add_submodel(simulation)
        .add_service(build_context());
    pkg
}

/// One value written by the service through the runtime API.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServiceWrite {
    pub path: String,
    pub value: Value,
}

type WriteLog = Arc<Mutex<Vec<ServiceWrite>>>;

/// In-process stand-in for `compensate.py`: same reads, same arithmetic, same writes.
pub fn geometry_behavior(ctx: &BehaviorContext<'_>, writes: Option<&WriteLog>) -> BehaviorOutcome {
    let run = || -> Result<(), String> {
        let input = ctx.env.get("AAS_INPUT_POSITION").ok_or("AAS_INPUT_POSITION missing")?;
        let output = ctx.env.get("AAS_OUTPUT_POSITION").ok_or("AAS_OUTPUT_POSITION missing")?;
        let delta = |axis: &str| -> Result<f64, String> {
            ctx.env
                .get(&format!("DELTA_{axis}"))
                .map_or(Ok(0.0), |v| v.parse::<f64>().map_err(|e| e.to_string()))
        };
        let read = |axis: &str| -> Result<f64, String> {
            ctx.api
                .read(&format!("{input}.{axis}"))?
                .as_f64()
                .ok_or_else(|| format!("{axis} is not numeric"))
        };
        let measured = Position::new(read("X")?, read("Y")?, read("Z")?);
        let model = CompensationModel {
            dx: delta("X")?,
            dy: delta("Y")?,
            dz: delta("Z")?,
        };
        let p = compensate(measured, model).map_err(|e| e.to_string())?;
        for (axis, v) in [("X", p.x), ("Y", p.y), ("Z", p.z)] {
            let path = format!("{output}.{axis}");
            ctx.api.write(&path, Value::Double(v))?;
            if let Some(log) = writes {
                log.lock().unwrap_or_else(|e| e.into_inner()).push(ServiceWrite {
                    path,
                    value: Value::Double(v),
                });
            }
        }
        Ok(())
    };
    match run() {
        Ok(()) => BehaviorOutcome::exited(0),
        Err(e) => {
            tracing::warn!("geometry correction failed: {e}");
            BehaviorOutcome::exited(1)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioTranscript {
    pub events: Vec<LifecycleEvent>,
    pub transitions: Vec<Transition>,
    pub activations: Vec<InstanceId>,
    pub writes: Vec<ServiceWrite>,
    pub final_position: Position,
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    /// Applied in order, one PATCH per axis.
    pub positions: Vec<Position>,
    pub delta: CompensationModel,
    pub reactivation: ReactivationPolicy,
}

impl ScenarioConfig {
    pub fn new(positions: Vec<Position>, delta: CompensationModel) -> Self {
        Self {
            positions,
            delta,
            reactivation: ReactivationPolicy::Restart,
        }
    }
}

/// Imports the package into a fresh simulated runtime, patches every position
/// axis by axis, then supervises until no instance is left running.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioTranscript, RuntimeError> {
    let engine = SimulatedEngine::new();
    let clock = ManualClock::default();
    let rt = Runtime::simulated(engine.clone(), Arc::new(clock.clone()));
    let writes: WriteLog = Arc::default();
    let log = writes.clone();
    engine.register_behavior(build_context().content_hash, move |ctx| geometry_behavior(ctx, Some(&log)));

    rt.import_package(build_case_study_package_with(config.delta, config.reactivation))?;
    let cps = cps_position();
    for p in &config.positions {
        for (axis, v) in [("X", p.x), ("Y", p.y), ("Z", p.z)] {
            rt.update_element(&cps.child(short(axis)), Value::Double(v))?;
        }
    }
    while rt.instances().iter().any(|i| i.is_running()) {
        clock.advance(std::time::Duration::from_millis(100));
        rt.supervision_tick();
    }

    let sim = simulation_position();
    let read = |axis: &str| -> Result<f64, RuntimeError> {
        Ok(rt
            .manager()
            .read_value(&sim.child(short(axis)))?
            .as_f64()
            .expect("simulation axes are doubles"))
    };
    let final_position = Position::new(read("X")?, read("Y")?, read("Z")?);
    let transitions = rt.transitions();
    let writes = std::mem::take(&mut *writes.lock().unwrap_or_else(|e| e.into_inner()));
    Ok(ScenarioTranscript {
        events: rt.events(),
        activations: transitions
            .iter()
            .filter(|t| t.from.is_none())
            .map(|t| t.instance_id.clone())
            .collect(),
        transitions,
        writes,
        final_position,
    })
}
