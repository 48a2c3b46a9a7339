//! Untrusted task scheduler for requests that name no target device.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::codec::Digest;
use crate::ids::{AttributeId, DeviceId, TeeSchemeTag};
use crate::ledger::Outbound;
use crate::registry::{Registry, RequirementList};
use crate::simnet::{ActorId, Message};

/// Unauthenticated claim of what a device runs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilityAdvertisement {
    pub device_id: DeviceId,
    pub scheme: TeeSchemeTag,
    pub attributes: Vec<AttributeId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerMode {
    #[default]
    Honest,
    /// Routes to `pick` when set, otherwise to the lowest-id device that
    /// does not satisfy the request.
    Adversarial { pick: Option<DeviceId> },
}

pub struct Scheduler {
    mode: SchedulerMode,
    registry: Registry,
    ads: BTreeMap<DeviceId, CapabilityAdvertisement>,
    routed: BTreeSet<Digest>,
}

impl Scheduler {
    pub fn new(mode: SchedulerMode, registry: Registry) -> Self {
        Self {
            mode,
            registry,
            ads: BTreeMap::new(),
            routed: BTreeSet::new(),
        }
    }

    pub fn mode(&self) -> &SchedulerMode {
        &self.mode
    }

    pub fn set_registry(&mut self, registry: Registry) {
        self.registry = registry;
    }

    /// Replaces any earlier advertisement for the same device.
    pub fn register_capabilities(&mut self, ad: CapabilityAdvertisement) {
        self.ads.insert(ad.device_id, ad);
    }

    fn fits(&self, lst: &RequirementList, ad: &CapabilityAdvertisement) -> bool {
        self.registry
            .satisfies(lst, &ad.attributes)
            .is_ok_and(|s| s.satisfied)
    }

    pub fn match_request(&self, lst: &RequirementList) -> Option<DeviceId> {
        self.match_excluding(lst, None)
    }

    fn match_excluding(&self, lst: &RequirementList, skip: Option<DeviceId>) -> Option<DeviceId> {
        let mut candidates = self.ads.values().filter(|ad| Some(ad.device_id) != skip);
        match &self.mode {
            SchedulerMode::Honest => candidates.find(|ad| self.fits(lst, ad)).map(|ad| ad.device_id),
            SchedulerMode::Adversarial { pick: Some(d) } => Some(*d),
            SchedulerMode::Adversarial { pick: None } => {
                candidates.find(|ad| !self.fits(lst, ad)).map(|ad| ad.device_id)
            }
        }
    }

    pub fn handle(&mut self, msg: Message) -> Vec<Outbound> {
        let Message::Forward { request, proof } = msg else {
            return Vec::new();
        };
        if request.lst.target_device.is_some() || !self.routed.insert(request.digest()) {
            return Vec::new();
        }
        // Never route a request back to the device that issued it.
        let pick = self
            .match_excluding(&request.lst, Some(request.requester_id))
            .filter(|d| *d != request.requester_id);
        pick.map(|d| Outbound {
            to: ActorId::Device(d),
            msg: Message::Forward { request, proof },
        })
        .into_iter()
        .collect()
    }
}
