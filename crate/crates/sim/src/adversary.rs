//! Network adversary: observes links, delays, drops and replays traffic,
//! runs clients it controls, and can take over or crash nodes. Scenario
//! files list its actions with virtual timestamps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

use aot_core::faults::FaultKind;
use aot_core::params::{Level, Topology};
use aot_core::protocol::{NodeId, Submission};

use crate::frame::{Endpoint, Frame, FrameKind};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Party {
    #[default]
    Any,
    Client,
    L1,
    L2,
    L3,
}

/// Selects frames on links. Empty fields match everything.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkFilter {
    pub from: Party,
    pub to: Party,
    pub kinds: Vec<FrameKind>,
    /// Only frames to or from these clients.
    pub clients: Vec<u32>,
    /// Never frames to or from these clients.
    pub except_clients: Vec<u32>,
    pub nodes: Vec<u16>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "do", rename_all = "snake_case")]
pub enum Action {
    /// Record the metadata (endpoints, kind, size, time) of matching
    /// frames.
    Observe {
        #[serde(default)]
        link: LinkFilter,
    },
    Delay {
        #[serde(default)]
        link: LinkFilter,
        delay_ms: u64,
        #[serde(default = "one")]
        probability: f64,
    },
    Drop {
        #[serde(default)]
        link: LinkFilter,
        #[serde(default = "one")]
        probability: f64,
    },
    /// Capture the next `count` matching submissions and submit each again
    /// from a controlled client after a random delay.
    Replay {
        #[serde(default)]
        link: LinkFilter,
        count: usize,
        #[serde(default = "replay_min")]
        min_delay_ms: u64,
        #[serde(default = "replay_max")]
        max_delay_ms: u64,
    },
    /// The listed clients become adversarial: no cover traffic, no
    /// retrievals, and they serve as injection points.
    ControlClients { clients: Vec<u32> },
    /// Controlled clients send real messages to each other at `rate_per_s`.
    Flood { rate_per_s: f64 },
    /// Controlled clients submit `count` envelopes that won't open at
    /// Level 2.
    InjectGarbage { count: usize },
    /// Take over nodes and make them deviate.
    Corrupt {
        nodes: Vec<u16>,
        kinds: Vec<FaultKind>,
        probability: f64,
    },
    /// Crash nodes.
    Offline { nodes: Vec<u16> },
}

fn one() -> f64 {
    1.0
}

fn replay_min() -> u64 {
    30_000
}

fn replay_max() -> u64 {
    600_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedAction {
    #[serde(default)]
    pub at_ms: u64,
    /// End of the action's effect; open-ended when absent.
    #[serde(default)]
    pub until_ms: Option<u64>,
    #[serde(flatten)]
    pub action: Action,
}

impl TimedAction {
    pub fn active(&self, now_ms: u64) -> bool {
        now_ms >= self.at_ms && self.until_ms.is_none_or(|u| now_ms < u)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    #[serde(rename = "action")]
    pub actions: Vec<TimedAction>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("the adversary cannot control all {0} clients")]
    AllClients(usize),
    #[error("client {0} does not exist")]
    UnknownClient(u32),
    #[error("node {0} does not exist")]
    UnknownNode(u16),
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn honest() -> Self {
        Self {
            name: "honest".into(),
            ..Default::default()
        }
    }

    pub fn controlled_clients(&self) -> BTreeSet<u32> {
        self.actions
            .iter()
            .filter_map(|a| match &a.action {
                Action::ControlClients { clients } => Some(clients.iter().copied()),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn validate(&self, clients: usize, topology: &Topology) -> Result<(), ScenarioError> {
        let controlled = self.controlled_clients();
        if clients > 0 && controlled.len() >= clients {
            return Err(ScenarioError::AllClients(clients));
        }
        if let Some(&c) = controlled.iter().find(|&&c| c as usize >= clients) {
            return Err(ScenarioError::UnknownClient(c));
        }
        for a in &self.actions {
            let (nodes, p): (&[u16], Option<f64>) = match &a.action {
                Action::Corrupt {
                    nodes, probability, ..
                } => (nodes, Some(*probability)),
                Action::Offline { nodes } => (nodes, None),
                Action::Delay { probability, .. } | Action::Drop { probability, .. } => {
                    (&[], Some(*probability))
                }
                _ => (&[], None),
            };
            if let Some(&n) = nodes
                .iter()
                .find(|&&n| topology.level_of(NodeId(n)).is_none())
            {
                return Err(ScenarioError::UnknownNode(n));
            }
            if let Some(p) = p.filter(|p| !(0.0..=1.0).contains(p)) {
                return Err(ScenarioError::Probability(p));
            }
        }
        Ok(())
    }
}

/// What the adversary does with one frame.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LinkVerdict {
    Pass,
    Drop,
    Delay(u64),
}

/// One frame as seen on the wire.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Observation {
    pub at_ms: u64,
    pub from: Endpoint,
    pub to: Endpoint,
    pub kind: FrameKind,
    pub bytes: usize,
}

struct Capture {
    action: usize,
    remaining: usize,
}

pub struct Adversary {
    scenario: Scenario,
    topology: Topology,
    controlled: BTreeSet<u32>,
    captures: Vec<Capture>,
    pub observations: Vec<Observation>,
    pub dropped: u64,
    pub delayed: u64,
    rng: ChaCha20Rng,
}

impl Adversary {
    pub fn new(scenario: Scenario, topology: Topology, seed: u64) -> Self {
        let controlled = scenario.controlled_clients();
        let captures = scenario
            .actions
            .iter()
            .enumerate()
            .filter_map(|(i, a)| match a.action {
                Action::Replay { count, .. } => Some(Capture {
                    action: i,
                    remaining: count,
                }),
                _ => None,
            })
            .collect();
        Self {
            scenario,
            topology,
            controlled,
            captures,
            observations: Vec::new(),
            dropped: 0,
            delayed: 0,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn controls(&self, client: u32) -> bool {
        self.controlled.contains(&client)
    }

    pub fn controlled(&self) -> &BTreeSet<u32> {
        &self.controlled
    }

    fn party(&self, e: Endpoint) -> Party {
        match e {
            Endpoint::Client(_) => Party::Client,
            Endpoint::Node(n) => match self.topology.level_of(n) {
                Some(Level::L1) => Party::L1,
                Some(Level::L2) => Party::L2,
                Some(Level::L3) => Party::L3,
                None => Party::Any,
            },
        }
    }

    fn matches(&self, f: &LinkFilter, from: Endpoint, to: Endpoint, kind: FrameKind) -> bool {
        let side = |p: Party, e: Endpoint| p == Party::Any || p == self.party(e);
        let client_of = |e: Endpoint| match e {
            Endpoint::Client(c) => Some(c),
            Endpoint::Node(_) => None,
        };
        let node_of = |e: Endpoint| match e {
            Endpoint::Node(n) => Some(n.0),
            Endpoint::Client(_) => None,
        };
        let clients: Vec<u32> = [from, to].into_iter().filter_map(client_of).collect();
        let nodes: Vec<u16> = [from, to].into_iter().filter_map(node_of).collect();
        side(f.from, from)
            && side(f.to, to)
            && (f.kinds.is_empty() || f.kinds.contains(&kind))
            && (f.clients.is_empty() || clients.iter().any(|c| f.clients.contains(c)))
            && !clients.iter().any(|c| f.except_clients.contains(c))
            && (f.nodes.is_empty() || nodes.iter().any(|n| f.nodes.contains(n)))
    }

    /// Decides the fate of one frame. Captured submissions come back as
    /// `(delay, submission)` pairs to re-inject.
    pub fn on_frame(
        &mut self,
        now_ms: u64,
        from: Endpoint,
        to: Endpoint,
        frame: &Frame,
        replays: &mut Vec<(u64, Submission)>,
    ) -> LinkVerdict {
        let kind = frame.kind();
        let observing = self.scenario.actions.iter().any(|a| {
            a.active(now_ms)
                && matches!(&a.action, Action::Observe { link } if self.matches(link, from, to, kind))
        });
        if observing {
            self.observations.push(Observation {
                at_ms: now_ms,
                from,
                to,
                kind,
                bytes: frame.wire_len(),
            });
        }
        if let Frame::Submit(sub) = frame {
            for i in 0..self.captures.len() {
                let a = &self.scenario.actions[self.captures[i].action];
                let Action::Replay {
                    link,
                    min_delay_ms,
                    max_delay_ms,
                    ..
                } = &a.action
                else {
                    continue;
                };
                if self.captures[i].remaining > 0
                    && a.active(now_ms)
                    && self.matches(link, from, to, kind)
                {
                    let d = self
                        .rng
                        .gen_range(*min_delay_ms..=(*max_delay_ms).max(*min_delay_ms));
                    replays.push((d, sub.clone()));
                    self.captures[i].remaining -= 1;
                }
            }
        }
        let mut delay = 0;
        for a in self.scenario.actions.iter().filter(|a| a.active(now_ms)) {
            match &a.action {
                Action::Drop { link, probability } if self.matches(link, from, to, kind) => {
                    if self.rng.gen_bool(*probability) {
                        self.dropped += 1;
                        return LinkVerdict::Drop;
                    }
                }
                Action::Delay {
                    link,
                    delay_ms,
                    probability,
                } if self.matches(link, from, to, kind) && self.rng.gen_bool(*probability) => {
                    delay += delay_ms;
                }
                _ => {}
            }
        }
        if delay > 0 {
            self.delayed += 1;
            LinkVerdict::Delay(delay)
        } else {
            LinkVerdict::Pass
        }
    }

    /// Distinct clients (outside the adversary's control) that opened an OT
    /// session with `l3` during `[from_ms, to_ms]`.
    pub fn requesters(&self, l3: NodeId, from_ms: u64, to_ms: u64) -> BTreeSet<u32> {
        self.observations
            .iter()
            .filter(|o| o.kind == FrameKind::OtOpen && o.to == Endpoint::Node(l3))
            .filter(|o| (from_ms..=to_ms).contains(&o.at_ms))
            .filter_map(|o| match o.from {
                Endpoint::Client(c) if !self.controls(c) => Some(c),
                _ => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use aot_core::params::NetworkParams;

    const SCRIPT: &str = r#"
name = "demo"

[[action]]
do = "observe"

[[action]]
at_ms = 1000
until_ms = 2000
do = "drop"
link = { from = "client", to = "l1", kinds = ["submit"], except_clients = [0] }

[[action]]
do = "delay"
delay_ms = 50
link = { to = "l3" }

[[action]]
do = "control_clients"
clients = [5, 6]

[[action]]
do = "corrupt"
nodes = [3]
kinds = ["alter_tag"]
probability = 0.5
"#;

    fn topo() -> Topology {
        Topology::generate(&NetworkParams::default(), 1).0
    }

    #[test]
    fn parses_and_validates() {
        let s = Scenario::from_toml(SCRIPT).unwrap();
        assert_eq!(s.actions.len(), 5);
        assert_eq!(s.controlled_clients(), BTreeSet::from([5, 6]));
        s.validate(10, &topo()).unwrap();
        assert!(matches!(
            s.validate(2, &topo()),
            Err(ScenarioError::AllClients(2))
        ));
    }

    #[test]
    fn controlling_every_client_is_rejected() {
        let s = Scenario::from_toml("[[action]]\ndo = \"control_clients\"\nclients = [0, 1, 2]\n")
            .unwrap();
        assert!(matches!(
            s.validate(3, &topo()),
            Err(ScenarioError::AllClients(3))
        ));
        s.validate(4, &topo()).unwrap();
    }

    #[test]
    fn filters_apply_by_party_window_and_client() {
        let t = topo();
        let l1 = Endpoint::Node(t.l1[0].id);
        let l3 = Endpoint::Node(t.l3[0].id);
        let mut a = Adversary::new(Scenario::from_toml(SCRIPT).unwrap(), t, 1);
        let f = Frame::OtOpen { ticket: 1 };
        let mut r = Vec::new();
        assert_eq!(
            a.on_frame(0, Endpoint::Client(1), l3, &f, &mut r),
            LinkVerdict::Delay(50)
        );
        assert_eq!(
            a.on_frame(0, Endpoint::Client(1), l1, &f, &mut r),
            LinkVerdict::Pass
        );
        assert_eq!(a.observations.len(), 2);
        assert_eq!(a.requesters(t_l3(&a), 0, 10).len(), 1);
    }

    fn t_l3(a: &Adversary) -> NodeId {
        a.topology.l3[0].id
    }
}
