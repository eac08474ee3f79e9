//! Strong Kleene three-valued logic.

use std::fmt;

use serde::{Deserialize, Serialize};

/// A K3 truth value. The derived order `False < True < Unknown` is only a
/// tie-breaking convention and matches the class indices 0, 1, 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum K3 {
    False = 0,
    True = 1,
    Unknown = 2,
}

impl K3 {
    pub const ALL: [K3; 3] = [K3::False, K3::True, K3::Unknown];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<K3> {
        Self::ALL.get(i).copied()
    }

    pub fn from_bool(b: bool) -> K3 {
        if b {
            K3::True
        } else {
            K3::False
        }
    }

    pub fn symbol(self) -> char {
        match self {
            K3::False => 'F',
            K3::True => 'T',
            K3::Unknown => 'U',
        }
    }

    pub fn from_symbol(c: char) -> Option<K3> {
        match c {
            'F' => Some(K3::False),
            'T' => Some(K3::True),
            'U' => Some(K3::Unknown),
            _ => None,
        }
    }

    /// Position in the truth ordering F < U < T.
    fn truth_rank(self) -> u8 {
        match self {
            K3::False => 0,
            K3::Unknown => 1,
            K3::True => 2,
        }
    }

    fn from_truth_rank(r: u8) -> K3 {
        match r {
            0 => K3::False,
            1 => K3::Unknown,
            _ => K3::True,
        }
    }
}

impl fmt::Display for K3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

/// The five logic-operator slots of the task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum K3Op {
    And = 0,
    Or = 1,
    Imp = 2,
    Iff = 3,
    Xor = 4,
}

impl K3Op {
    pub const ALL: [K3Op; 5] = [K3Op::And, K3Op::Or, K3Op::Imp, K3Op::Iff, K3Op::Xor];
    /// The four operators covered by the diagnostic rosters.
    pub const NAMED: [K3Op; 4] = [K3Op::And, K3Op::Or, K3Op::Imp, K3Op::Iff];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<K3Op> {
        Self::ALL.get(i).copied()
    }

    pub fn symbol(self) -> &'static str {
        match self {
            K3Op::And => "∧",
            K3Op::Or => "∨",
            K3Op::Imp => "→",
            K3Op::Iff => "↔",
            K3Op::Xor => "⊕",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            K3Op::And => "AND",
            K3Op::Or => "OR",
            K3Op::Imp => "IMP",
            K3Op::Iff => "IFF",
            K3Op::Xor => "XOR",
        }
    }
}

pub fn k3_not(x: K3) -> K3 {
    match x {
        K3::False => K3::True,
        K3::True => K3::False,
        K3::Unknown => K3::Unknown,
    }
}

pub fn k3_apply(op: K3Op, x: K3, y: K3) -> K3 {
    match op {
        K3Op::And => K3::from_truth_rank(x.truth_rank().min(y.truth_rank())),
        K3Op::Or => K3::from_truth_rank(x.truth_rank().max(y.truth_rank())),
        K3Op::Imp => k3_apply(K3Op::Or, k3_not(x), y),
        K3Op::Iff => k3_apply(K3Op::And, k3_apply(K3Op::Imp, x, y), k3_apply(K3Op::Imp, y, x)),
        K3Op::Xor => k3_not(k3_apply(K3Op::Iff, x, y)),
    }
}
