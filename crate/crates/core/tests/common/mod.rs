//! Generators and a scenario driver shared by the integration suites.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use aasrt_core::clock::ManualClock;
use aasrt_core::engine::{BehaviorOutcome, EngineCall, SimulatedEngine};
use aasrt_core::events::LifecycleEvent;
use aasrt_core::instance::{ServiceInstance, Transition};
use aasrt_core::model::{
    AasId, AssetAdministrationShell, ElementReference, FileElement, IdShort, Submodel, SubmodelElement, Value,
};
use aasrt_core::package::{AasxPackage, ServiceContextEntry};
use aasrt_core::runtime::Runtime;
use aasrt_core::service_execution::{ContextRef, ExecutionTrigger, ReactivationPolicy, ServiceExecutionSpec};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

pub fn id(s: &str) -> AasId {
    AasId::new(s).unwrap()
}

pub fn short(s: &str) -> IdShort {
    IdShort::new(s).unwrap()
}

/// A runner with a fixed seed, so every run sees the same cases.
pub fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

/// Every subset of the four execution triggers, indexed by bitmask.
pub fn trigger_subset(mask: u8) -> BTreeSet<ExecutionTrigger> {
    ExecutionTrigger::ALL
        .into_iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, t)| t)
        .collect()
}

// ---------------------------------------------------------------- packages

fn id_short_strategy() -> impl Strategy<Value = String> {
    "[A-Za-z][A-Za-z0-9_]{0,10}"
}

fn value_strategy() -> impl Strategy<Value = Value> {
    prop_oneof![
        "[ -~\n\t]{0,16}".prop_map(Value::String),
        any::<i64>().prop_map(Value::Integer),
        any::<f64>().prop_filter("finite", |d| d.is_finite()).prop_map(Value::Double),
        (-1e6f64..1e6).prop_map(Value::Double),
        any::<bool>().prop_map(Value::Boolean),
    ]
}

fn leaf_strategy(submodel_ids: usize) -> impl Strategy<Value = SubmodelElement> {
    prop_oneof![
        4 => value_strategy().prop_map(|v| SubmodelElement::property("P", v).unwrap()),
        1 => (0..submodel_ids, proptest::collection::vec(id_short_strategy(), 0..3)).prop_map(|(sm, path)| {
            let mut r = ElementReference::submodel(id(&format!("urn:gen:sm{sm}")));
            for seg in path {
                r = r.child(short(&seg));
            }
            SubmodelElement::reference("R", r).unwrap()
        }),
        1 => ("[a-z]{1,8}", any::<bool>()).prop_map(|(name, json)| {
            let ext = if json { "json" } else { "txt" };
            SubmodelElement::File(FileElement {
                id_short: short("F"),
                content_type: "text/plain".into(),
                path: format!("aasx/files/{name}.{ext}"),
            })
        }),
    ]
}

fn element_strategy(submodel_ids: usize) -> impl Strategy<Value = SubmodelElement> {
    leaf_strategy(submodel_ids).prop_recursive(3, 24, 4, |inner| {
        proptest::collection::vec(inner, 0..4).prop_map(|children| {
            SubmodelElement::collection("C", renamed(children)).unwrap()
        })
    })
}

/// Gives siblings unique idShorts by suffixing their position.
fn renamed(children: Vec<SubmodelElement>) -> Vec<SubmodelElement> {
    children
        .into_iter()
        .enumerate()
        .map(|(i, mut el)| {
            let name = short(&format!("{}{i}", el.id_short()));
            match &mut el {
                SubmodelElement::Property(p) => p.id_short = name,
                SubmodelElement::Reference(r) => r.id_short = name,
                SubmodelElement::File(f) => f.id_short = name,
                SubmodelElement::Collection(c) => c.id_short = name,
            }
            el
        })
        .collect()
}

fn submodel_strategy(index: usize, total: usize) -> impl Strategy<Value = (Submodel, bool)> {
    (
        id_short_strategy(),
        proptest::option::of("urn:[a-z]{1,6}:[a-z0-9]{1,6}"),
        proptest::collection::vec(element_strategy(total), 0..5),
        any::<bool>(),
    )
        .prop_map(move |(id_short, semantic, elements, json)| {
            let mut sm = Submodel::new(id(&format!("urn:gen:sm{index}")), short(&id_short));
            sm.semantic_id = semantic;
            sm.elements = renamed(elements);
            (sm, json)
        })
}

fn context_strategy(index: usize) -> impl Strategy<Value = ServiceContextEntry> {
    (
        proptest::collection::vec(any::<u8>(), 0..32),
        proptest::collection::btree_map("[a-z]{1,6}(/[a-z]{1,6})?\\.[a-z]{1,3}", proptest::collection::vec(any::<u8>(), 0..64), 0..4),
        (0u64..5, 0u64..20, 0u64..20),
    )
        .prop_map(move |(noise, files, (major, minor, patch))| {
            let mut containerfile = b"FROM scratch\n# ".to_vec();
            containerfile.extend(hex_bytes(&noise));
            containerfile.push(b'\n');
            ServiceContextEntry::new(
                short(&format!("svc{index}")),
                format!("{major}.{minor}.{patch}"),
                containerfile,
                files,
            )
        })
}

fn hex_bytes(bytes: &[u8]) -> Vec<u8> {
    bytes.iter().flat_map(|b| format!("{b:02x}").into_bytes()).collect()
}

/// Structurally valid packages: unique ids, representable text, consistent manifest.
pub fn package_strategy() -> impl Strategy<Value = AasxPackage> {
    (1usize..4, 0usize..3, 0usize..3)
        .prop_flat_map(|(n_sm, n_shell, n_ctx)| {
            let submodels: Vec<_> = (0..n_sm).map(|i| submodel_strategy(i, n_sm)).collect();
            let shells = proptest::collection::vec(
                (id_short_strategy(), proptest::collection::btree_set(0..n_sm + 1, 0..3)),
                n_shell,
            );
            let contexts: Vec<_> = (0..n_ctx).map(context_strategy).collect();
            let files = proptest::collection::btree_map(
                "aasx/files/[a-z]{1,8}\\.(txt|json)",
                proptest::collection::vec(any::<u8>(), 0..48),
                0..3,
            );
            (submodels, shells, contexts, files)
        })
        .prop_map(|(submodels, shells, contexts, files)| {
            let mut pkg = AasxPackage::new();
            for (sm, json) in submodels {
                let ext = if json { "json" } else { "xml" };
                let path = format!("aasx/submodels/{}.{ext}", sm.id.as_str().replace(':', "_"));
                pkg.add_submodel_at(path, sm);
            }
            for (i, (id_short, refs)) in shells.into_iter().enumerate() {
                let mut shell = AssetAdministrationShell::new(id(&format!("urn:gen:aas{i}")), short(&id_short));
                for r in refs {
                    // Index n_sm points outside the package: an external reference.
                    shell = shell.with_submodel(id(&format!("urn:gen:sm{r}")));
                }
                pkg.add_shell(shell);
            }
            for ctx in contexts {
                pkg.add_service(ctx);
            }
            for (path, bytes) in files {
                pkg.add_file(path, bytes);
            }
            pkg
        })
}

// ---------------------------------------------------------------- scenarios

pub const DATA: &str = "urn:gen:data";
pub const OUT: &str = "urn:gen:out";
pub const PROPS: [&str; 3] = ["A", "B", "C"];

#[derive(Debug, Clone)]
pub enum BehaviorGen {
    Exit { code: i64 },
    Run { health: Vec<bool> },
}

#[derive(Debug, Clone)]
pub struct ServiceGen {
    pub triggers: BTreeSet<ExecutionTrigger>,
    /// 0..3 picks a property of the data submodel, 3 the whole submodel.
    pub input: usize,
    pub timeout_ms: Option<u64>,
    pub health: Option<(u64, u32)>,
    pub policy: ReactivationPolicy,
    pub behavior: BehaviorGen,
    pub write_output: bool,
}

#[derive(Debug, Clone)]
pub enum Op {
    Update { prop: usize, value: i64 },
    ExternalGet { prop: Option<usize> },
    InternalRead { prop: usize },
    Demand { service: usize },
    Tick { advance_ms: u64 },
    Stop { nth: usize },
    Exit { nth: usize, code: i64 },
    FailBuilds(bool),
    FailRuns(bool),
    DeleteSpec { service: usize },
    Reimport,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub services: Vec<ServiceGen>,
    pub ops: Vec<Op>,
}

fn policy_strategy() -> impl Strategy<Value = ReactivationPolicy> {
    prop_oneof![
        Just(ReactivationPolicy::Restart),
        Just(ReactivationPolicy::QueueOne),
        Just(ReactivationPolicy::IgnoreWhileRunning),
    ]
}

fn service_strategy() -> impl Strategy<Value = ServiceGen> {
    (
        1u8..16,
        0usize..4,
        proptest::option::of(100u64..1500),
        proptest::option::of((100u64..600, 1u32..4)),
        policy_strategy(),
        prop_oneof![
            (-2i64..3).prop_map(|code| BehaviorGen::Exit { code }),
            proptest::collection::vec(any::<bool>(), 0..8).prop_map(|health| BehaviorGen::Run { health }),
        ],
        any::<bool>(),
    )
        .prop_map(|(mask, input, timeout_ms, health, policy, behavior, write_output)| ServiceGen {
            triggers: trigger_subset(mask),
            input,
            timeout_ms,
            health,
            policy,
            behavior,
            write_output,
        })
}

fn op_strategy(services: usize) -> impl Strategy<Value = Op> {
    prop_oneof![
        6 => (0usize..3, 0i64..4).prop_map(|(prop, value)| Op::Update { prop, value }),
        3 => proptest::option::of(0usize..3).prop_map(|prop| Op::ExternalGet { prop }),
        2 => (0usize..3).prop_map(|prop| Op::InternalRead { prop }),
        3 => (0..services).prop_map(|service| Op::Demand { service }),
        5 => (0u64..700).prop_map(|advance_ms| Op::Tick { advance_ms }),
        1 => (0usize..8).prop_map(|nth| Op::Stop { nth }),
        1 => (0usize..8, -1i64..3).prop_map(|(nth, code)| Op::Exit { nth, code }),
        1 => any::<bool>().prop_map(Op::FailBuilds),
        1 => any::<bool>().prop_map(Op::FailRuns),
        1 => (0..services).prop_map(|service| Op::DeleteSpec { service }),
        1 => Just(Op::Reimport),
    ]
}

pub fn scenario_strategy(max_ops: usize) -> impl Strategy<Value = Scenario> {
    proptest::collection::vec(service_strategy(), 1..5).prop_flat_map(move |services| {
        let n = services.len();
        (Just(services), proptest::collection::vec(op_strategy(n), 1..max_ops))
            .prop_map(|(services, ops)| Scenario { services, ops })
    })
}

pub fn input_ref(input: usize) -> ElementReference {
    match input {
        0..=2 => ElementReference::from_dotted(id(DATA), PROPS[input]).unwrap(),
        _ => ElementReference::submodel(id(DATA)),
    }
}

pub fn service_context(i: usize) -> ServiceContextEntry {
    ServiceContextEntry::new(
        short(&format!("svc{i}")),
        "1.0.0",
        format!("FROM scratch\n# service {i}\n").into_bytes(),
        BTreeMap::new(),
    )
}

pub fn scenario_spec(i: usize, s: &ServiceGen) -> ServiceExecutionSpec {
    let mut spec = ServiceExecutionSpec::new(
        short(&format!("svc{i}")),
        ContextRef::Package {
            service_ref: short(&format!("svc{i}")),
            content_hash: None,
        },
        s.triggers.iter().copied(),
    )
    .with_input("IN", input_ref(s.input))
    .with_output("OUT", ElementReference::from_dotted(id(OUT), &format!("S{i}")).unwrap())
    .with_reactivation(s.policy);
    if let Some(ms) = s.timeout_ms {
        spec = spec.with_timeout(Duration::from_millis(ms));
    }
    if let Some((interval, max)) = s.health {
        spec = spec.with_health(Duration::from_millis(interval), max);
    }
    spec
}

pub fn spec_submodel_id(i: usize) -> AasId {
    id(&format!("urn:gen:spec{i}"))
}

pub fn scenario_package(services: &[ServiceGen]) -> AasxPackage {
    let mut data = Submodel::new(id(DATA), short("Data"));
    for p in PROPS {
        data = data.with_element(SubmodelElement::property(p, Value::Integer(0)).unwrap());
    }
    let mut out = Submodel::new(id(OUT), short("Out"));
    for i in 0..services.len() {
        out = out.with_element(SubmodelElement::property(&format!("S{i}"), Value::Integer(0)).unwrap());
    }
    let mut pkg = AasxPackage::new();
    let mut shell = AssetAdministrationShell::new(id("urn:gen:aas"), short("Gen"))
        .with_submodel(id(DATA))
        .with_submodel(id(OUT));
    pkg.add_submodel(data).add_submodel(out);
    for (i, s) in services.iter().enumerate() {
        pkg.add_submodel(scenario_spec(i, s).to_submodel(spec_submodel_id(i), short(&format!("Spec{i}"))));
        pkg.add_service(service_context(i));
        shell = shell.with_submodel(spec_submodel_id(i));
    }
    pkg.add_shell(shell);
    pkg
}

/// Everything observable after a scenario has run.
#[derive(Debug)]
pub struct Outcome {
    pub transitions: Vec<Transition>,
    pub instances: Vec<ServiceInstance>,
    pub events: Vec<LifecycleEvent>,
    pub engine_calls: Vec<EngineCall>,
    pub call_log: Vec<String>,
    /// Successful external reads issued by the driver.
    pub external_gets: usize,
    /// Operations after which some instance was left in Registered or Building.
    pub stuck: usize,
    /// Containers still known to the engine after shutdown and a final reap.
    pub leaked_containers: usize,
    pub startup_faults_injected: bool,
}

pub fn execute(scenario: &Scenario) -> Outcome {
    let engine = SimulatedEngine::new();
    let clock = ManualClock::default();
    let rt = Runtime::simulated(engine.clone(), Arc::new(clock.clone()));
    for (i, s) in scenario.services.iter().enumerate() {
        let hash = service_context(i).content_hash;
        let behavior = s.behavior.clone();
        let write = s.write_output;
        engine.register_behavior(hash, move |ctx| {
            if write {
                let input = ctx.api.read(&ctx.env["AAS_INPUT_IN"]).unwrap_or(Value::Integer(-1));
                let value = match input {
                    Value::Integer(v) => Value::Integer(v + 1),
                    _ => Value::Integer(100),
                };
                ctx.api.write(&ctx.env["AAS_OUTPUT_OUT"], value).expect("output exists");
            }
            match &behavior {
                BehaviorGen::Exit { code } => BehaviorOutcome::exited(*code),
                BehaviorGen::Run { health } => BehaviorOutcome::running(health.clone()),
            }
        });
    }
    let package = scenario_package(&scenario.services);
    rt.import_package(package.clone()).expect("generated package imports");

    let mut external_gets = 0;
    let mut stuck = 0;
    let mut startup_faults_injected = false;
    for op in &scenario.ops {
        match op {
            Op::Update { prop, value } => {
                rt.update_element(&input_ref(*prop), Value::Integer(*value)).unwrap();
            }
            Op::ExternalGet { prop } => {
                match prop {
                    Some(p) => {
                        rt.get_element(&input_ref(*p), true).unwrap();
                    }
                    None => {
                        rt.get_submodel(&id(DATA), true).unwrap();
                    }
                }
                external_gets += 1;
            }
            Op::InternalRead { prop } => {
                use aasrt_core::engine::ServiceApi;
                rt.service_api().read(&input_ref(*prop).canonical_path()).unwrap();
                rt.pump();
            }
            Op::Demand { service } => {
                let _ = rt.demand(&short(&format!("svc{service}")));
            }
            Op::Tick { advance_ms } => {
                clock.advance(Duration::from_millis(*advance_ms));
                rt.supervision_tick();
            }
            Op::Stop { nth } => {
                let instances = rt.instances();
                if !instances.is_empty() {
                    let _ = rt.stop_instance(&instances[nth % instances.len()].instance_id);
                }
            }
            Op::Exit { nth, code } => {
                let running: Vec<_> = rt.instances().into_iter().filter(|i| i.is_running()).collect();
                if !running.is_empty() {
                    let cid = running[nth % running.len()].container_id.clone().unwrap();
                    let _ = engine.exit(&cid, *code);
                }
            }
            Op::FailBuilds(on) => {
                startup_faults_injected |= *on;
                engine.set_fail_builds(*on);
            }
            Op::FailRuns(on) => {
                startup_faults_injected |= *on;
                engine.set_fail_runs(*on);
            }
            Op::DeleteSpec { service } => {
                let _ = rt.delete_submodel(&spec_submodel_id(*service));
            }
            Op::Reimport => {
                assert!(rt.import_package(package.clone()).is_err(), "re-import must conflict");
            }
        }
        if rt
            .instances()
            .iter()
            .any(|i| matches!(i.state, aasrt_core::instance::InstanceState::Registered | aasrt_core::instance::InstanceState::Building))
        {
            stuck += 1;
        }
    }
    rt.shutdown();
    rt.supervision_tick();
    Outcome {
        transitions: rt.transitions(),
        instances: rt.instances(),
        events: rt.events(),
        engine_calls: engine.calls(),
        call_log: rt.call_log().entries(),
        external_gets,
        stuck,
        leaked_containers: engine.containers().len(),
        startup_faults_injected,
    }
}
