use std::collections::BTreeSet;

use icoap::{
    construct_names, identifier_for, matches, AttributeAssignment, AttributeHierarchy, GroupName,
};
use proptest::prelude::*;

/// Hierarchy of `levels` levels named l0..; values v0.. are distinct.
fn setup(levels: usize, assigned: &[bool]) -> (AttributeHierarchy, AttributeAssignment) {
    let h = AttributeHierarchy::new((0..levels).map(|i| format!("l{i}"))).unwrap();
    let mut a = AttributeAssignment::new();
    for (i, &on) in assigned.iter().enumerate().take(levels) {
        if i == 0 || on {
            a.assign(&format!("l{i}"), &format!("v{i}")).unwrap();
        }
    }
    (h, a)
}

/// Independent enumeration: every subset of assigned non-root levels as a
/// bitmask, labels from the deepest level up, root last.
fn oracle_names(h: &AttributeHierarchy, a: &AttributeAssignment) -> BTreeSet<String> {
    let specific: Vec<&str> = h.levels()[1..].iter().filter_map(|l| a.get(l)).collect();
    let root = a.get(h.root()).unwrap();
    (0u32..1 << specific.len())
        .map(|mask| {
            let mut labels: Vec<&str> = (0..specific.len())
                .rev()
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| specific[i])
                .collect();
            labels.push(root);
            labels.join(".")
        })
        .collect()
}

fn rendered(names: &BTreeSet<GroupName>) -> BTreeSet<String> {
    names.iter().map(ToString::to_string).collect()
}

fn assignment_strategy() -> impl Strategy<Value = (usize, Vec<bool>)> {
    (1usize..=4).prop_flat_map(|k| (Just(k), proptest::collection::vec(any::<bool>(), k)))
}

#[test]
fn building6_example_name_set() {
    let h = AttributeHierarchy::new(["building", "wing", "floor"]).unwrap();
    let a = AttributeAssignment::new()
        .with("building", "building6")
        .unwrap()
        .with("wing", "west")
        .unwrap()
        .with("floor", "floor3")
        .unwrap();
    let names = rendered(&construct_names(&h, &a).unwrap());
    let expected: BTreeSet<String> = [
        "building6",
        "west.building6",
        "floor3.building6",
        "floor3.west.building6",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    assert_eq!(names, expected);
}

#[test]
fn cardinality_is_exhaustively_two_to_the_assigned_minus_one() {
    for levels in 1..=4usize {
        for mask in 0u32..1 << levels {
            let assigned: Vec<bool> = (0..levels).map(|i| mask & (1 << i) != 0).collect();
            let (h, a) = setup(levels, &assigned);
            let names = construct_names(&h, &a).unwrap();
            assert_eq!(
                names.len(),
                1 << (a.len() - 1),
                "{levels} levels, mask {mask:b}"
            );
            assert_eq!(rendered(&names), oracle_names(&h, &a));
        }
    }
}

/// Every candidate built from any labels in the hierarchy, in any order.
fn candidate_names(levels: usize) -> Vec<GroupName> {
    let labels: Vec<String> = (0..levels).map(|i| format!("v{i}")).collect();
    let mut out = Vec::new();
    // sequences of up to `levels` distinct labels
    fn grow(prefix: &mut Vec<String>, labels: &[String], out: &mut Vec<GroupName>) {
        if !prefix.is_empty() {
            out.push(GroupName::from_authority(&prefix.join(".")).unwrap());
        }
        for l in labels {
            if !prefix.contains(l) {
                prefix.push(l.clone());
                grow(prefix, labels, out);
                prefix.pop();
            }
        }
    }
    grow(&mut Vec::new(), &labels, &mut out);
    out
}

#[test]
fn matching_agrees_with_enumeration_exhaustively() {
    for levels in 1..=4usize {
        let candidates = candidate_names(levels);
        for mask in 0u32..1 << levels {
            let assigned: Vec<bool> = (0..levels).map(|i| mask & (1 << i) != 0).collect();
            let (h, a) = setup(levels, &assigned);
            let names = construct_names(&h, &a).unwrap();
            for n in &candidates {
                assert_eq!(
                    matches(&a, n, &h),
                    names.contains(n),
                    "{n} with mask {mask:b}"
                );
            }
        }
    }
}

proptest! {
    #[test]
    fn root_is_present_and_last((levels, assigned) in assignment_strategy()) {
        let (h, a) = setup(levels, &assigned);
        let names = construct_names(&h, &a).unwrap();
        let root = GroupName::from_authority("v0").unwrap();
        prop_assert!(names.contains(&root));
        for n in &names {
            prop_assert_eq!(n.root_label(), "v0");
        }
    }

    #[test]
    fn unassigned_new_level_changes_nothing((levels, assigned) in assignment_strategy()) {
        let (h, a) = setup(levels, &assigned);
        let before = construct_names(&h, &a).unwrap();
        let wider = h.extended("extra").unwrap();
        prop_assert_eq!(construct_names(&wider, &a).unwrap(), before);
    }

    #[test]
    fn assigning_a_new_level_doubles_and_keeps((levels, assigned) in assignment_strategy()) {
        let (h, a) = setup(levels, &assigned);
        let before = construct_names(&h, &a).unwrap();
        let wider = h.extended("extra").unwrap();
        let a2 = a.clone().with("extra", "vx").unwrap();
        let after = construct_names(&wider, &a2).unwrap();
        prop_assert_eq!(after.len(), 2 * before.len());
        prop_assert!(before.is_subset(&after));
    }

    #[test]
    fn identifiers_are_injective((levels, assigned) in assignment_strategy()) {
        let (h, a) = setup(levels, &assigned);
        let names = construct_names(&h, &a).unwrap();
        let ids: BTreeSet<_> = names.iter().map(identifier_for).collect();
        prop_assert_eq!(ids.len(), names.len());
        for id in &ids {
            prop_assert!(id.as_str().starts_with("grp/"));
        }
    }

    #[test]
    fn different_locations_share_only_common_names(
        (levels, assigned) in assignment_strategy(),
        other in proptest::collection::vec(any::<bool>(), 4),
    ) {
        // a second NAP on the same root whose non-root values all differ
        let (h, a) = setup(levels, &assigned);
        let mut b = AttributeAssignment::new();
        b.assign("l0", "v0").unwrap();
        for (i, &on) in other.iter().enumerate().take(levels).skip(1) {
            if on {
                b.assign(&format!("l{i}"), &format!("w{i}")).unwrap();
            }
        }
        let shared: Vec<_> = construct_names(&h, &a)
            .unwrap()
            .intersection(&construct_names(&h, &b).unwrap())
            .cloned()
            .collect();
        prop_assert_eq!(shared, vec![GroupName::from_authority("v0").unwrap()]);
    }
}
