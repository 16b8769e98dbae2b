use crate::kb;

/// SQL keywords plus the end-of-query marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Keyword {
    Select,
    Star,
    From,
    Table,
    Where,
    And,
    Eq,
    Eoq,
}

impl Keyword {
    pub const ALL: [Keyword; 8] = [
        Keyword::Select,
        Keyword::Star,
        Keyword::From,
        Keyword::Table,
        Keyword::Where,
        Keyword::And,
        Keyword::Eq,
        Keyword::Eoq,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Keyword::Select => kb::SELECT,
            Keyword::Star => kb::STAR,
            Keyword::From => kb::FROM,
            Keyword::Table => kb::TABLE,
            Keyword::Where => kb::WHERE,
            Keyword::And => kb::AND,
            Keyword::Eq => kb::EQ,
            Keyword::Eoq => kb::EOQ,
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.token() == token)
    }
}

/// One decoding step: a keyword, a schema field (by index) or a word copied
/// from the context (by index into the context's copy vocabulary).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Keyword(Keyword),
    Field(usize),
    Value(usize),
}

impl Action {
    pub const EOQ: Action = Action::Keyword(Keyword::Eoq);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StateKind {
    Start,
    AfterSelect,
    AfterStar,
    AfterFrom,
    /// `SELECT * FROM kb` emitted; WHERE or `<eoq>` next.
    AfterTable,
    FieldSlot,
    AfterField(usize),
    ValueSlot(usize),
    /// A clause was completed; AND or `<eoq>` next.
    AfterValue,
    Done,
}

/// Position in the query automaton.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GrammarState {
    pub kind: StateKind,
    /// Bit `f` set once field `f` has been constrained.
    pub constrained: u64,
    pub clauses: usize,
    /// Tokens emitted so far.
    pub len: usize,
}

impl GrammarState {
    pub fn is_terminal(&self) -> bool {
        self.kind == StateKind::Done
    }
}

/// Query automaton for a schema with `n_fields` fields. Queries carry at most
/// `max_clauses` clauses and never constrain a field twice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grammar {
    pub n_fields: usize,
    pub max_clauses: usize,
}

/// Tokens per `WHERE/AND f = v` clause.
pub const CLAUSE_TOKENS: usize = 4;
/// `SELECT * FROM kb`.
pub const HEADER_TOKENS: usize = 4;

impl Grammar {
    pub fn initial(&self) -> GrammarState {
        GrammarState {
            kind: StateKind::Start,
            constrained: 0,
            clauses: 0,
            len: 0,
        }
    }

    /// Default token budget (excluding `<eoq>`) fitting `max_clauses` clauses.
    pub fn default_max_len(&self) -> usize {
        HEADER_TOKENS + CLAUSE_TOKENS * self.max_clauses
    }

    fn can_open_clause(&self, gs: &GrammarState, n_copyable: usize) -> bool {
        n_copyable > 0 && gs.clauses < self.max_clauses && (gs.constrained.count_ones() as usize) < self.n_fields
    }

    /// Actions permitted at `gs`. Value slots offer every copyable context
    /// word; already-constrained fields are excluded. Empty only when terminal.
    pub fn valid_actions(&self, gs: &GrammarState, n_copyable: usize) -> Vec<Action> {
        use Keyword::*;
        match gs.kind {
            StateKind::Start => vec![Action::Keyword(Select)],
            StateKind::AfterSelect => vec![Action::Keyword(Star)],
            StateKind::AfterStar => vec![Action::Keyword(From)],
            StateKind::AfterFrom => vec![Action::Keyword(Table)],
            StateKind::AfterTable | StateKind::AfterValue => {
                let open = if gs.kind == StateKind::AfterTable { Where } else { And };
                let mut v = Vec::with_capacity(2);
                if self.can_open_clause(gs, n_copyable) {
                    v.push(Action::Keyword(open));
                }
                v.push(Action::EOQ);
                v
            }
            StateKind::FieldSlot => (0..self.n_fields)
                .filter(|f| gs.constrained & (1 << f) == 0)
                .map(Action::Field)
                .collect(),
            StateKind::AfterField(_) => vec![Action::Keyword(Eq)],
            StateKind::ValueSlot(_) => (0..n_copyable).map(Action::Value).collect(),
            StateKind::Done => Vec::new(),
        }
    }

    /// The state after taking `action`, or `None` if the grammar forbids it.
    pub fn advance(&self, gs: &GrammarState, action: Action, n_copyable: usize) -> Option<GrammarState> {
        use Keyword::*;
        let mut next = *gs;
        next.len += 1;
        next.kind = match (gs.kind, action) {
            (StateKind::Start, Action::Keyword(Select)) => StateKind::AfterSelect,
            (StateKind::AfterSelect, Action::Keyword(Star)) => StateKind::AfterStar,
            (StateKind::AfterStar, Action::Keyword(From)) => StateKind::AfterFrom,
            (StateKind::AfterFrom, Action::Keyword(Table)) => StateKind::AfterTable,
            (StateKind::AfterTable, Action::Keyword(Where)) | (StateKind::AfterValue, Action::Keyword(And))
                if self.can_open_clause(gs, n_copyable) =>
            {
                StateKind::FieldSlot
            }
            (StateKind::AfterTable | StateKind::AfterValue, Action::Keyword(Eoq)) => StateKind::Done,
            (StateKind::FieldSlot, Action::Field(f)) if f < self.n_fields && gs.constrained & (1 << f) == 0 => {
                next.constrained |= 1 << f;
                StateKind::AfterField(f)
            }
            (StateKind::AfterField(f), Action::Keyword(Eq)) => StateKind::ValueSlot(f),
            (StateKind::ValueSlot(_), Action::Value(v)) if v < n_copyable => {
                next.clauses += 1;
                StateKind::AfterValue
            }
            _ => return None,
        };
        Some(next)
    }

    /// Whether `gs` is a point where a new clause may start.
    pub fn at_clause_boundary(gs: &GrammarState) -> bool {
        matches!(gs.kind, StateKind::AfterTable | StateKind::AfterValue)
    }
}
