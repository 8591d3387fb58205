use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use readmit::records::{group_by_patient, parse_admissions, parse_records, write_admissions, write_records, PatientHistory};
use readmit::synth::{generate, SignalKind, SynthConfig};

fn corpus(n_patients: usize) -> readmit::synth::SynthOutput {
    generate(&SynthConfig {
        n_patients,
        signal: SignalKind::Temporal,
        seed: 21,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn generated_files_round_trip_without_malformed_lines() {
    let out = corpus(200);
    let mut buf = Vec::new();
    write_records(&mut buf, &out.events).unwrap();
    let events = parse_records(buf.as_slice()).unwrap();
    assert!(events.errors.is_empty(), "{:?}", &events.errors[..events.errors.len().min(3)]);
    assert_eq!(events.items, out.events);

    buf.clear();
    write_admissions(&mut buf, &out.admissions).unwrap();
    let admissions = parse_admissions(buf.as_slice()).unwrap();
    assert!(admissions.errors.is_empty());
    assert_eq!(admissions.items, out.admissions);
}

/// Per patient: timestamp order, and for each timestamp the multiset of
/// records (equal timestamps only keep input order).
type TimeGroups = Vec<(Option<String>, Vec<String>)>;

fn canonical(hs: &[PatientHistory]) -> Vec<(String, TimeGroups, usize)> {
    hs.iter()
        .map(|h| {
            let mut groups: TimeGroups = Vec::new();
            for e in &h.events {
                let key = e.sort_key().map(|t| t.to_rfc3339());
                let text = e.to_json().to_string();
                match groups.last_mut() {
                    Some((k, v)) if *k == key => v.push(text),
                    _ => groups.push((key, vec![text])),
                }
            }
            for (_, v) in groups.iter_mut() {
                v.sort();
            }
            (h.patient_id.clone(), groups, h.admissions.len())
        })
        .collect()
}

#[test]
fn grouping_ignores_record_order() {
    let out = corpus(300);
    assert!(out.events.len() >= 10_000, "{} records", out.events.len());
    let reference = canonical(&group_by_patient(out.events.clone(), out.admissions.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..3 {
        let mut events = out.events.clone();
        let mut admissions = out.admissions.clone();
        events.shuffle(&mut rng);
        admissions.shuffle(&mut rng);
        let grouped = group_by_patient(events, admissions);
        assert_eq!(canonical(&grouped), reference);
        for h in &grouped {
            let keys: Vec<_> = h.events.iter().map(|e| e.sort_key()).collect();
            assert!(keys.windows(2).all(|w| w[0] <= w[1]));
            assert!(h.admissions.windows(2).all(|w| w[0].start <= w[1].start));
        }
    }
    let per_patient: BTreeMap<&str, usize> = reference.iter().map(|(p, g, _)| (p.as_str(), g.len())).collect();
    assert_eq!(per_patient.len(), 300);
}
