//! Named parameter storage shared by models, the optimizer, checkpointing,
//! and the freeze policy.
//!
//! Models hold [`ParamId`] handles into one arena. Training leases parameters
//! onto a tape per step; the optimizer writes updates back through the arena,
//! touching only entries marked trainable. Entry order is insertion order and
//! is the canonical, deterministic iteration order everywhere (optimizer
//! steps, checkpoint layout, hashing).

use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Element> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamArena<T: Element> {
    entries: Vec<ParamEntry<T>>,
    by_name: std::collections::HashMap<String, ParamId>,
}

impl<T: Element> ParamArena<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: std::collections::HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable: true,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| e.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn set_trainable_all(&mut self, trainable: bool) {
        for e in &mut self.entries {
            e.trainable = trainable;
        }
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.name.as_str())
            .collect()
    }

    pub fn count_values(&self, filter: impl Fn(&ParamEntry<T>) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|e| filter(e))
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn total_params(&self) -> usize {
        self.count_values(|_| true)
    }

    pub fn trainable_params(&self) -> usize {
        self.count_values(|e| e.trainable)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.all_finite())
    }

    /// Cast every entry to another element type, preserving names, order and
    /// trainable flags. Used to rebuild f32 models in f64 for grad checks.
    pub fn cast<U: Element>(&self) -> ParamArena<U> {
        let mut out = ParamArena::new();
        for e in &self.entries {
            let id = out.insert(e.name.clone(), e.tensor.cast::<U>());
            out.entry_mut(id).trainable = e.trainable;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_and_lookup() {
        let mut arena = ParamArena::<f32>::new();
        let id = arena.insert("enc.w", Tensor::zeros(vec![2, 3]));
        assert_eq!(arena.lookup("enc.w"), Some(id));
        assert_eq!(arena.tensor(id).numel(), 6);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_panic() {
        let mut arena = ParamArena::<f32>::new();
        arena.insert("w", Tensor::zeros(vec![1]));
        arena.insert("w", Tensor::zeros(vec![1]));
    }

    #[test]
    fn prefix_freezing() {
        let mut arena = ParamArena::<f32>::new();
        arena.insert("ocr.w", Tensor::zeros(vec![4]));
        arena.insert("adapter.w", Tensor::zeros(vec![2]));
        arena.set_trainable_all(false);
        arena.set_trainable_prefix("adapter.", true);
        assert_eq!(arena.trainable_names(), vec!["adapter.w"]);
        assert_eq!(arena.trainable_params(), 2);
        assert_eq!(arena.total_params(), 6);
    }
}
