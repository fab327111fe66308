//! Messages and FIFO channels between devices and the server.

use std::collections::VecDeque;

use crate::nn::Matrix;
use crate::stage_graph::Resource;

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Split-layer output of one micro-batch and its labels.
    Activations { activations: Matrix, labels: Matrix },
    /// Loss gradient with respect to the transmitted activations.
    ActivationGrads(Matrix),
    /// Device finished its iterations for the epoch.
    StopEpoch,
    /// Serialized device-side model.
    DeviceModel(String),
    /// Serialized device-side part of the aggregated model.
    GlobalDeviceModel(String),
    StopTraining,
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Activations { .. } => "activations",
            Message::ActivationGrads(_) => "activation_grads",
            Message::StopEpoch => "stop_epoch",
            Message::DeviceModel(_) => "device_model",
            Message::GlobalDeviceModel(_) => "global_device_model",
            Message::StopTraining => "stop_training",
        }
    }
}

/// Delivery record of one message.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageRecord {
    pub kind: &'static str,
    pub channel: Resource,
    pub epoch: usize,
    pub iteration: usize,
    pub batch: usize,
    pub megabits: f64,
    /// Time the sender handed the message to the channel.
    pub sent: f64,
    /// Time the channel started transmitting it.
    pub start: f64,
    pub delivered: f64,
}

#[derive(Debug, Clone)]
pub struct Envelope {
    pub message: Message,
    pub iteration: usize,
    pub batch: usize,
    pub megabits: f64,
    pub start: f64,
    pub delivered: f64,
}

/// Position of a message in the training loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tag {
    pub epoch: usize,
    pub iteration: usize,
    pub batch: usize,
}

/// One-directional link carrying one transfer at a time, in send order.
#[derive(Debug)]
pub struct Channel {
    resource: Resource,
    free_at: f64,
    queue: VecDeque<Envelope>,
}

impl Channel {
    pub fn new(resource: Resource) -> Self {
        Self {
            resource,
            free_at: 0.0,
            queue: VecDeque::new(),
        }
    }

    pub fn resource(&self) -> Resource {
        self.resource
    }

    /// Queues `message`; transmission starts once the channel is free and
    /// lasts `duration`. Returns the delivery record.
    pub fn send(
        &mut self,
        message: Message,
        at: f64,
        duration: f64,
        megabits: f64,
        tag: Tag,
    ) -> MessageRecord {
        let Tag {
            epoch,
            iteration,
            batch,
        } = tag;
        let start = at.max(self.free_at);
        let delivered = start + duration;
        self.free_at = delivered;
        let record = MessageRecord {
            kind: message.kind(),
            channel: self.resource,
            epoch,
            iteration,
            batch,
            megabits,
            sent: at,
            start,
            delivered,
        };
        self.queue.push_back(Envelope {
            message,
            iteration,
            batch,
            megabits,
            start,
            delivered,
        });
        record
    }

    pub fn peek(&self) -> Option<&Envelope> {
        self.queue.front()
    }

    pub fn recv(&mut self) -> Option<Envelope> {
        self.queue.pop_front()
    }

    /// Rebases the channel clock at an epoch boundary.
    pub fn reset_clock(&mut self) {
        self.free_at = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tag(batch: usize) -> Tag {
        Tag {
            epoch: 0,
            iteration: 0,
            batch,
        }
    }

    #[test]
    fn fifo_and_serialized() {
        let mut c = Channel::new(Resource::Uplink(0));
        let a = c.send(Message::StopEpoch, 0.0, 2.0, 1.0, tag(1));
        let b = c.send(Message::StopTraining, 1.0, 1.0, 1.0, tag(2));
        assert_eq!((a.start, a.delivered), (0.0, 2.0));
        assert_eq!((b.start, b.delivered), (2.0, 3.0));
        assert_eq!(c.recv().unwrap().batch, 1);
        assert_eq!(c.recv().unwrap().batch, 2);
        assert!(c.recv().is_none());
    }
}
