use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Mutex;

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::contract::Amount;
use crate::crypto::Digest;
use crate::identity::WalletId;

use super::LedgerError;

pub type NoteId = Digest;
pub type LockId = Digest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Owner {
    Wallet(WalletId),
    Lock(LockId),
}

impl Canonical for Owner {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Owner::Wallet(w) => enc.u8(0).item(w),
            Owner::Lock(l) => enc.u8(1).item(l),
        };
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            0 => Ok(Owner::Wallet(dec.item()?)),
            1 => Ok(Owner::Lock(dec.item()?)),
            tag => Err(DecodeError::InvalidTag { what: "Owner", tag }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FundNote {
    pub note_id: NoteId,
    pub amount: Amount,
    pub owner: Owner,
}

impl FundNote {
    pub fn new(origin: &Digest, index: u32, amount: Amount, owner: Owner) -> Self {
        let note_id = Digest::tagged(
            "escrowpay/note/v1",
            &[&origin.0, &index.to_be_bytes(), &amount.to_be_bytes(), &owner.to_canonical_bytes()],
        );
        FundNote { note_id, amount, owner }
    }
}

impl Canonical for FundNote {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.note_id).u64(self.amount).item(&self.owner);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(FundNote { note_id: dec.item()?, amount: dec.u64()?, owner: dec.item()? })
    }
}

#[derive(Debug, Default)]
struct Shard {
    unspent: HashMap<NoteId, FundNote>,
    /// Inputs held by an in-flight transfer between its two phases.
    held: HashMap<NoteId, FundNote>,
    spent: HashSet<NoteId>,
}

/// Unspent-note set partitioned by the first byte of the note id.
#[derive(Debug)]
pub struct NoteStore {
    shards: Vec<Mutex<Shard>>,
}

impl NoteStore {
    pub fn new(shards: usize) -> Self {
        assert!(shards > 0, "at least one shard");
        NoteStore { shards: (0..shards).map(|_| Mutex::default()).collect() }
    }

    pub fn shard_count(&self) -> usize {
        self.shards.len()
    }

    pub fn shard_of(&self, id: &NoteId) -> usize {
        id.0[0] as usize % self.shards.len()
    }

    pub fn insert(&self, note: FundNote) {
        let mut shard = self.shards[self.shard_of(&note.note_id)].lock().unwrap();
        shard.unspent.insert(note.note_id, note);
    }

    /// Two-phase rewrite of `inputs` into `outputs`.
    ///
    /// Phase one moves every input from `unspent` to `held`, in ascending
    /// note id order; any failure returns the already-held inputs. Phase two
    /// marks the inputs spent and inserts the outputs.
    pub fn commit(
        &self,
        inputs: &[NoteId],
        owner_ok: impl Fn(&Owner) -> bool,
        outputs: &[FundNote],
    ) -> Result<Vec<FundNote>, LedgerError> {
        self.commit_burning(inputs, owner_ok, outputs, 0)
    }

    /// As [`NoteStore::commit`], with `burned` of the input value leaving
    /// circulation.
    pub fn commit_burning(
        &self,
        inputs: &[NoteId],
        owner_ok: impl Fn(&Owner) -> bool,
        outputs: &[FundNote],
        burned: Amount,
    ) -> Result<Vec<FundNote>, LedgerError> {
        let mut order: Vec<NoteId> = inputs.to_vec();
        order.sort();
        if order.windows(2).any(|w| w[0] == w[1]) {
            return Err(LedgerError::DoubleSpend(order[0]));
        }
        if outputs.iter().any(|n| n.amount == 0) {
            return Err(LedgerError::NonPositiveAmount);
        }

        let mut held: Vec<FundNote> = Vec::with_capacity(order.len());
        let mut failure = None;
        for id in &order {
            let mut shard = self.shards[self.shard_of(id)].lock().unwrap();
            match shard.unspent.remove(id) {
                Some(note) if owner_ok(&note.owner) => {
                    shard.held.insert(*id, note.clone());
                    held.push(note);
                }
                Some(note) => {
                    shard.unspent.insert(*id, note);
                    failure = Some(LedgerError::NotOwner(*id));
                }
                None if shard.held.contains_key(id) || shard.spent.contains(id) => {
                    failure = Some(LedgerError::DoubleSpend(*id));
                }
                None => failure = Some(LedgerError::UnknownNote(*id)),
            }
            if failure.is_some() {
                break;
            }
        }

        if failure.is_none() {
            let ins: u128 = held.iter().map(|n| n.amount as u128).sum();
            let outs: u128 = outputs.iter().map(|n| n.amount as u128).sum::<u128>() + burned as u128;
            if ins != outs {
                failure = Some(LedgerError::ValueMismatch { inputs: ins as u64, outputs: outs as u64 });
            }
        }

        if let Some(err) = failure {
            for note in held {
                let mut shard = self.shards[self.shard_of(&note.note_id)].lock().unwrap();
                shard.held.remove(&note.note_id);
                shard.unspent.insert(note.note_id, note);
            }
            return Err(err);
        }

        for note in &held {
            let mut shard = self.shards[self.shard_of(&note.note_id)].lock().unwrap();
            shard.held.remove(&note.note_id);
            shard.spent.insert(note.note_id);
        }
        for note in outputs {
            self.insert(note.clone());
        }
        // Return inputs in the caller's order.
        let by_id: HashMap<NoteId, FundNote> = held.into_iter().map(|n| (n.note_id, n)).collect();
        Ok(inputs.iter().map(|id| by_id[id].clone()).collect())
    }

    /// Unspent notes owned by `owner`, in note id order.
    pub fn notes_of(&self, owner: &Owner) -> Vec<FundNote> {
        let mut notes: Vec<FundNote> = self
            .shards
            .iter()
            .flat_map(|s| s.lock().unwrap().unspent.values().filter(|n| &n.owner == owner).cloned().collect::<Vec<_>>())
            .collect();
        notes.sort_by_key(|n| n.note_id);
        notes
    }

    pub fn balance_of(&self, owner: &Owner) -> Amount {
        self.shards
            .iter()
            .map(|s| s.lock().unwrap().unspent.values().filter(|n| &n.owner == owner).map(|n| n.amount).sum::<Amount>())
            .sum()
    }

    /// Totals per owner over unspent and held notes.
    pub fn totals(&self) -> BTreeMap<Owner, Amount> {
        let mut out = BTreeMap::new();
        for s in &self.shards {
            let shard = s.lock().unwrap();
            for n in shard.unspent.values().chain(shard.held.values()) {
                *out.entry(n.owner).or_insert(0) += n.amount;
            }
        }
        out
    }

    pub fn is_unspent(&self, id: &NoteId) -> bool {
        self.shards[self.shard_of(id)].lock().unwrap().unspent.contains_key(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wallet(b: u8) -> Owner {
        Owner::Wallet(WalletId([b; 20]))
    }

    fn store_with(amounts: &[Amount], shards: usize) -> (NoteStore, Vec<FundNote>) {
        let store = NoteStore::new(shards);
        let notes: Vec<FundNote> =
            amounts.iter().enumerate().map(|(i, a)| FundNote::new(&Digest::ZERO, i as u32, *a, wallet(1))).collect();
        for n in &notes {
            store.insert(n.clone());
        }
        (store, notes)
    }

    #[test]
    fn split_commits_both_outputs() {
        let (store, notes) = store_with(&[100], 2);
        let outs = vec![FundNote::new(&Digest::of(b"t"), 0, 95, wallet(2)), FundNote::new(&Digest::of(b"t"), 1, 5, wallet(3))];
        store.commit(&[notes[0].note_id], |o| *o == wallet(1), &outs).unwrap();
        assert_eq!(store.balance_of(&wallet(2)), 95);
        assert_eq!(store.balance_of(&wallet(3)), 5);
        assert_eq!(store.balance_of(&wallet(1)), 0);
    }

    #[test]
    fn value_mismatch_rolls_back() {
        let (store, notes) = store_with(&[60, 40], 2);
        let outs = vec![FundNote::new(&Digest::of(b"t"), 0, 101, wallet(2))];
        let ids = [notes[0].note_id, notes[1].note_id];
        assert_eq!(
            store.commit(&ids, |_| true, &outs),
            Err(LedgerError::ValueMismatch { inputs: 100, outputs: 101 })
        );
        assert!(ids.iter().all(|id| store.is_unspent(id)));
    }

    #[test]
    fn unknown_and_spent_inputs() {
        let (store, notes) = store_with(&[10], 1);
        let out = vec![FundNote::new(&Digest::of(b"t"), 0, 10, wallet(2))];
        let missing = Digest::of(b"nope");
        assert_eq!(store.commit(&[missing], |_| true, &out), Err(LedgerError::UnknownNote(missing)));
        store.commit(&[notes[0].note_id], |_| true, &out).unwrap();
        assert_eq!(store.commit(&[notes[0].note_id], |_| true, &out), Err(LedgerError::DoubleSpend(notes[0].note_id)));
    }

    #[test]
    fn partial_failure_releases_held_inputs() {
        let (store, notes) = store_with(&[10, 20], 2);
        let missing = Digest::of(b"nope");
        let out = vec![FundNote::new(&Digest::of(b"t"), 0, 30, wallet(2))];
        assert!(store.commit(&[notes[0].note_id, missing, notes[1].note_id], |_| true, &out).is_err());
        assert!(store.is_unspent(&notes[0].note_id) && store.is_unspent(&notes[1].note_id));
    }

    #[test]
    fn foreign_owner_rejected() {
        let (store, notes) = store_with(&[10], 2);
        let out = vec![FundNote::new(&Digest::of(b"t"), 0, 10, wallet(2))];
        assert_eq!(store.commit(&[notes[0].note_id], |o| *o == wallet(9), &out), Err(LedgerError::NotOwner(notes[0].note_id)));
        assert!(store.is_unspent(&notes[0].note_id));
    }
}
