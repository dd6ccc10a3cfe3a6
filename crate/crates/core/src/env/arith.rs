//! Single-digit addition tasks selected by seed.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArithmeticTask {
    pub a: u32,
    pub b: u32,
}

impl ArithmeticTask {
    /// Seed map: `a = seed mod 10`, `b = (seed / 10) mod 10`.
    pub fn from_seed(seed: u64) -> Self {
        ArithmeticTask { a: (seed % 10) as u32, b: ((seed / 10) % 10) as u32 }
    }

    pub fn prompt(&self) -> String {
        format!("{}+{}=", self.a, self.b)
    }

    pub fn answer(&self) -> String {
        (self.a + self.b).to_string()
    }

    pub fn score(&self, action_text: &str) -> f64 {
        if action_text.trim() == self.answer() {
            1.0
        } else {
            0.0
        }
    }
}
