//! Lifecycle events and the ordered queue that carries them to the orchestrator.

use std::collections::VecDeque;
use std::sync::Mutex;

use serde::Serialize;

use crate::clock::Timestamp;
use crate::instance::InstanceId;
use crate::model::{ElementReference, IdShort, Submodel, SubmodelElement, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum EventKind {
    Import,
    Update,
    Access,
    Demand,
    Tick,
    HealthReport,
}

impl EventKind {
    pub const ALL: [EventKind; 6] = [
        EventKind::Import,
        EventKind::Update,
        EventKind::Access,
        EventKind::Demand,
        EventKind::Tick,
        EventKind::HealthReport,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Import => "Import",
            EventKind::Update => "Update",
            EventKind::Access => "Access",
            EventKind::Demand => "Demand",
            EventKind::Tick => "Tick",
            EventKind::HealthReport => "HealthReport",
        }
    }
}

/// What changed in an `Update` event.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "change", rename_all = "camelCase")]
pub enum UpdatePayload {
    Value { old: Value, new: Value },
    ElementAdded { element: SubmodelElement },
    ElementRemoved { element: SubmodelElement },
    SubmodelDeleted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all_fields = "camelCase")]
pub enum EventPayload {
    /// A submodel entered the repository; carries its full content.
    Import { submodel: Box<Submodel> },
    Update(UpdatePayload),
    Access,
    Demand { service_id: IdShort },
    Tick { now: Timestamp },
    HealthReport { instance: InstanceId, healthy: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LifecycleEvent {
    pub seq: u64,
    pub subject: Option<ElementReference>,
    pub payload: EventPayload,
}

impl LifecycleEvent {
    pub fn kind(&self) -> EventKind {
        match &self.payload {
            EventPayload::Import { .. } => EventKind::Import,
            EventPayload::Update(_) => EventKind::Update,
            EventPayload::Access => EventKind::Access,
            EventPayload::Demand { .. } => EventKind::Demand,
            EventPayload::Tick { .. } => EventKind::Tick,
            EventPayload::HealthReport { .. } => EventKind::HealthReport,
        }
    }
}

#[derive(Debug, Default)]
struct BusState {
    next_seq: u64,
    queue: VecDeque<LifecycleEvent>,
    history: Option<Vec<LifecycleEvent>>,
}

/// Position of the bus at some instant, used to undo a failed import.
#[derive(Debug, Clone, Copy)]
pub struct BusMark {
    next_seq: u64,
    queue_len: usize,
    history_len: usize,
}

/// Single-consumer FIFO of lifecycle events with a runtime-wide sequence counter.
#[derive(Debug, Default)]
pub struct EventBus {
    state: Mutex<BusState>,
}

impl EventBus {
    pub fn new() -> Self {
        Self::default()
    }

    /// A bus that also keeps every emitted event for later inspection.
    pub fn with_history() -> Self {
        let bus = Self::default();
        bus.lock().history = Some(Vec::new());
        bus
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, BusState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn emit(&self, subject: Option<ElementReference>, payload: EventPayload) -> u64 {
        let mut state = self.lock();
        state.next_seq += 1;
        let event = LifecycleEvent {
            seq: state.next_seq,
            subject,
            payload,
        };
        if let Some(history) = &mut state.history {
            history.push(event.clone());
        }
        state.queue.push_back(event);
        state.next_seq
    }

    pub fn pop(&self) -> Option<LifecycleEvent> {
        self.lock().queue.pop_front()
    }

    pub fn pending(&self) -> usize {
        self.lock().queue.len()
    }

    pub fn history(&self) -> Vec<LifecycleEvent> {
        self.lock().history.clone().unwrap_or_default()
    }

    pub fn mark(&self) -> BusMark {
        let state = self.lock();
        BusMark {
            next_seq: state.next_seq,
            queue_len: state.queue.len(),
            history_len: state.history.as_ref().map_or(0, Vec::len),
        }
    }

    /// Drops everything emitted after `mark`.
    pub fn rollback(&self, mark: BusMark) {
        let mut state = self.lock();
        state.next_seq = mark.next_seq;
        state.queue.truncate(mark.queue_len);
        if let Some(history) = &mut state.history {
            history.truncate(mark.history_len);
        }
    }
}
