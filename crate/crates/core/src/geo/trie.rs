/// Binary trie over IPv4 address bits with longest-prefix lookup.
#[derive(Debug, Clone)]
pub(crate) struct PrefixTrie {
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    child: [u32; 2],
    value: u32,
}

const NONE: u32 = u32::MAX;

impl Node {
    const EMPTY: Node = Node {
        child: [NONE, NONE],
        value: NONE,
    };
}

impl Default for PrefixTrie {
    fn default() -> Self {
        PrefixTrie {
            nodes: vec![Node::EMPTY],
        }
    }
}

impl PrefixTrie {
    /// Inserts `value` at `addr/len`; returns the previous value at exactly
    /// that prefix, if any.
    pub(crate) fn insert(&mut self, addr: u32, len: u8, value: u32) -> Option<u32> {
        let mut node = 0usize;
        for depth in 0..len {
            let bit = ((addr >> (31 - depth)) & 1) as usize;
            let next = self.nodes[node].child[bit];
            node = if next == NONE {
                self.nodes.push(Node::EMPTY);
                let idx = (self.nodes.len() - 1) as u32;
                self.nodes[node].child[bit] = idx;
                idx as usize
            } else {
                next as usize
            };
        }
        let prev = std::mem::replace(&mut self.nodes[node].value, value);
        (prev != NONE).then_some(prev)
    }

    #[inline]
    pub(crate) fn lookup(&self, addr: u32) -> Option<u32> {
        let mut node = &self.nodes[0];
        let mut best = node.value;
        for depth in 0..32 {
            let bit = ((addr >> (31 - depth)) & 1) as usize;
            let next = node.child[bit];
            if next == NONE {
                break;
            }
            node = &self.nodes[next as usize];
            if node.value != NONE {
                best = node.value;
            }
        }
        (best != NONE).then_some(best)
    }
}
