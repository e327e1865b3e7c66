//! Synchronous in-process channel for single-threaded simulation. Every
//! request, reply and report still passes through the frame codec.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::rc::Rc;

use dnp_core::{Device, Report};

use crate::agent::handle;
use crate::msg::{decode, encode, Message};
use crate::session::{error_reply, Channel, SessionError};

/// Device-side queue of encoded report frames awaiting the controller.
#[derive(Clone, Default)]
pub struct ReportQueue(Rc<RefCell<VecDeque<Vec<u8>>>>);

impl ReportQueue {
    pub fn push(&self, r: Report) {
        self.0.borrow_mut().push_back(encode(0, &Message::Report(r)));
    }

    pub fn len(&self) -> usize {
        self.0.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.borrow().is_empty()
    }
}

pub struct LocalChannel {
    dev: Rc<RefCell<Device>>,
    reports: ReportQueue,
    next_xid: u32,
    closed: bool,
}

impl LocalChannel {
    pub fn new(dev: Rc<RefCell<Device>>) -> (Self, ReportQueue) {
        let reports = ReportQueue::default();
        (LocalChannel { dev, reports: reports.clone(), next_xid: 1, closed: false }, reports)
    }

    /// Later requests fail with `SessionClosed`.
    pub fn close(&mut self) {
        self.closed = true;
    }

    /// Delivers a raw frame to the device and returns the raw reply.
    pub fn exchange_raw(&mut self, frame: &[u8]) -> Option<Vec<u8>> {
        match decode(frame) {
            Ok(f) => Some(encode(f.xid, &handle(&mut self.dev.borrow_mut(), f.msg))),
            Err(e) => error_reply(frame, &e),
        }
    }
}

impl Channel for LocalChannel {
    fn request(&mut self, msg: Message) -> Result<Message, SessionError> {
        if self.closed {
            return Err(SessionError::SessionClosed);
        }
        let xid = self.next_xid;
        self.next_xid = self.next_xid.wrapping_add(1);
        let reply = self.exchange_raw(&encode(xid, &msg)).ok_or(SessionError::SessionClosed)?;
        let f = decode(&reply)?;
        debug_assert_eq!(f.xid, xid);
        Ok(f.msg)
    }

    fn drain_reports(&mut self) -> Vec<Report> {
        let frames: Vec<Vec<u8>> = self.reports.0.borrow_mut().drain(..).collect();
        frames
            .into_iter()
            .filter_map(|b| match decode(&b) {
                Ok(f) => match f.msg {
                    Message::Report(r) => Some(r),
                    _ => None,
                },
                Err(_) => None,
            })
            .collect()
    }
}
