use std::sync::Mutex;

use hmtd_core::Minutes;

/// Time source for the service. The logical clock advances by a fixed step on
/// every reading, which makes scenario transcripts reproducible.
#[derive(Debug)]
pub enum Clock {
    Wall,
    Logical { next: Mutex<Minutes>, step: u32 },
}

impl Clock {
    pub fn logical(start: Minutes, step: u32) -> Self {
        Clock::Logical { next: Mutex::new(start), step }
    }

    pub fn now(&self) -> Minutes {
        match self {
            Clock::Wall => Minutes::now(),
            Clock::Logical { next, step } => {
                let mut next = next.lock().expect("clock lock");
                let now = *next;
                *next = now.plus(*step);
                now
            }
        }
    }

    /// Moves a logical clock forward so it never reads before `at`.
    pub fn advance_past(&self, at: Minutes) {
        if let Clock::Logical { next, .. } = self {
            let mut next = next.lock().expect("clock lock");
            if next.0 <= at.0 {
                *next = at.plus(1);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logical_clock_steps() {
        let clock = Clock::logical(Minutes(10), 5);
        assert_eq!(clock.now(), Minutes(10));
        assert_eq!(clock.now(), Minutes(15));
        clock.advance_past(Minutes(100));
        assert_eq!(clock.now(), Minutes(101));
        clock.advance_past(Minutes(3));
        assert_eq!(clock.now(), Minutes(106));
    }
}
