use crate::tensor::fnv1a64;

const WORDS: &[&str] = &[
    "pick", "place", "open", "close", "push", "pull", "lift", "put", "move", "turn", "press",
    "grab", "wipe", "stack", "pour", "fold", "the", "a", "on", "in", "into", "onto", "from",
    "to", "of", "left", "right", "top", "bottom", "red", "green", "blue", "yellow", "black",
    "white", "small", "large", "block", "bowl", "cup", "plate", "drawer", "door", "book",
    "box", "basket", "shelf", "table", "button", "handle", "lid", "bottle", "towel", "sponge",
    "cabinet", "microwave", "stove", "sink", "floor", "bell", "phone", "elevator", "mug",
];

/// Toy whitespace vocabulary. Id 0 is padding; ids `1..vocab_size` map to
/// fixed words (synthetic `w<id>` beyond the built-in list). Unknown words
/// hash deterministically onto a non-padding id.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    size: usize,
}

impl Vocabulary {
    pub const PAD: u32 = 0;

    pub fn new(size: usize) -> Self {
        Self { size }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn word(&self, id: u32) -> String {
        match id as usize {
            0 => "<pad>".to_string(),
            i if i <= WORDS.len() => WORDS[i - 1].to_string(),
            i => format!("w{i}"),
        }
    }

    pub fn lookup(&self, word: &str) -> u32 {
        if self.size <= 1 {
            return 0;
        }
        let w = word.to_lowercase();
        if let Some(pos) = WORDS.iter().position(|&x| x == w) {
            if pos + 1 < self.size {
                return (pos + 1) as u32;
            }
        }
        if let Some(n) = w.strip_prefix('w').and_then(|n| n.parse::<usize>().ok()) {
            if n > WORDS.len() && n < self.size {
                return n as u32;
            }
        }
        1 + (fnv1a64(w.as_bytes()) % (self.size as u64 - 1)) as u32
    }

    /// Space-joined words for `ids`, skipping padding.
    pub fn render(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&t| t != Self::PAD)
            .map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
