//! 3x3 gomoku (three in a row).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Seat {
    X,
    O,
}

impl Seat {
    pub fn other(self) -> Seat {
        match self {
            Seat::X => Seat::O,
            Seat::O => Seat::X,
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Seat::X => 'X',
            Seat::O => 'O',
        }
    }

    pub fn index(self) -> usize {
        match self {
            Seat::X => 0,
            Seat::O => 1,
        }
    }
}

pub const LINES: [[usize; 3]; 8] = [
    [0, 1, 2],
    [3, 4, 5],
    [6, 7, 8],
    [0, 3, 6],
    [1, 4, 7],
    [2, 5, 8],
    [0, 4, 8],
    [2, 4, 6],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Win(Seat),
    Draw,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GomokuState {
    pub board: [Option<Seat>; 9],
    pub to_move: Seat,
}

impl Default for GomokuState {
    fn default() -> Self {
        GomokuState { board: [None; 9], to_move: Seat::X }
    }
}

impl GomokuState {
    pub fn legal_moves(&self) -> Vec<usize> {
        (0..9).filter(|&i| self.board[i].is_none()).collect()
    }

    pub fn winner(&self) -> Option<Seat> {
        LINES.iter().find_map(|l| {
            let a = self.board[l[0]]?;
            (self.board[l[1]] == Some(a) && self.board[l[2]] == Some(a)).then_some(a)
        })
    }

    pub fn outcome(&self) -> Option<Outcome> {
        if let Some(w) = self.winner() {
            Some(Outcome::Win(w))
        } else if self.board.iter().all(Option::is_some) {
            Some(Outcome::Draw)
        } else {
            None
        }
    }

    /// Places the side-to-move's mark on `cell` (0-based). Returns false if occupied.
    pub fn play(&mut self, cell: usize) -> bool {
        if cell >= 9 || self.board[cell].is_some() {
            return false;
        }
        self.board[cell] = Some(self.to_move);
        self.to_move = self.to_move.other();
        true
    }

    pub fn count(&self, seat: Seat) -> usize {
        self.board.iter().filter(|c| **c == Some(seat)).count()
    }

    pub fn rows(&self) -> String {
        let mut s = String::with_capacity(12);
        for r in 0..3 {
            for c in 0..3 {
                s.push(self.board[r * 3 + c].map_or('.', Seat::symbol));
            }
            s.push('\n');
        }
        s
    }

    /// Text rendering: a status line followed by the three board rows.
    pub fn render(&self) -> String {
        let status = match self.outcome() {
            None => format!("{} to move", self.to_move.symbol()),
            Some(Outcome::Win(s)) => format!("{} wins", s.symbol()),
            Some(Outcome::Draw) => "draw".to_string(),
        };
        format!("{status}\n{}", self.rows())
    }
}

/// A move is a single digit 1-9 naming a cell in row-major order.
pub fn parse_move(action_text: &str) -> Option<usize> {
    let t = action_text.trim();
    let mut chars = t.chars();
    match (chars.next(), chars.next()) {
        (Some(c @ '1'..='9'), None) => Some(c as usize - '1' as usize),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initial_render() {
        assert_eq!(GomokuState::default().render(), "X to move\n...\n...\n...\n");
    }

    #[test]
    fn top_row_win() {
        let mut s = GomokuState::default();
        for cell in [0, 3, 1, 4, 2] {
            assert!(s.play(cell));
        }
        assert_eq!(s.outcome(), Some(Outcome::Win(Seat::X)));
        assert_eq!(s.render(), "X wins\nXXX\nOO.\n...\n");
        assert!(!s.play(0));
    }

    #[test]
    fn moves_parse() {
        assert_eq!(parse_move("5"), Some(4));
        assert_eq!(parse_move(" 9 "), Some(8));
        assert_eq!(parse_move("0"), None);
        assert_eq!(parse_move("12"), None);
        assert_eq!(parse_move("x"), None);
        assert_eq!(parse_move(""), None);
    }
}
