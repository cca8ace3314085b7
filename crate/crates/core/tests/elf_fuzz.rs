use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use scriptdbg_core::symbols::elf::ElfFile;
use scriptdbg_core::Error;

fn seeds() -> Vec<Vec<u8>> {
    ["loop", "loop_pie", "loop_stripped", "libshadow.so", "first_write"]
        .iter()
        .map(|n| scriptdbg_fixtures::path(n))
        .filter(|p| p.exists())
        .map(|p| std::fs::read(p).unwrap())
        .collect()
}

fn mutate(rng: &mut StdRng, src: &[u8]) -> Vec<u8> {
    let mut data = src.to_vec();
    match rng.gen_range(0..5) {
        0 => data.truncate(rng.gen_range(0..=src.len())),
        1 => {
            for _ in 0..rng.gen_range(1..32) {
                let i = rng.gen_range(0..data.len());
                data[i] = rng.gen();
            }
        }
        2 => {
            // Header and table fields are where offsets and counts live.
            let span = data.len().min(256);
            for _ in 0..rng.gen_range(1..8) {
                let i = rng.gen_range(0..span);
                data[i] = rng.gen();
            }
        }
        3 => {
            let i = rng.gen_range(0..data.len().saturating_sub(8).max(1));
            let v: u64 = if rng.gen() { u64::MAX - rng.gen_range(0..4096) } else { rng.gen() };
            let end = (i + 8).min(data.len());
            data[i..end].copy_from_slice(&v.to_le_bytes()[..end - i]);
        }
        _ => {
            data.truncate(rng.gen_range(0..=src.len()));
            for _ in 0..rng.gen_range(0..16) {
                if data.is_empty() {
                    break;
                }
                let i = rng.gen_range(0..data.len());
                data[i] ^= 1 << rng.gen_range(0..8);
            }
        }
    }
    data
}

#[test]
fn parser_survives_ten_thousand_mutations() {
    let seeds = seeds();
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let (mut ok, mut rejected) = (0, 0);
    for i in 0..10_000 {
        let src = &seeds[i % seeds.len()];
        let data = mutate(&mut rng, src);
        match ElfFile::parse(&data) {
            Ok(elf) => {
                ok += 1;
                for s in &elf.symbols {
                    assert!(!s.name.is_empty());
                    assert!(s.value.checked_add(s.size).is_some());
                }
            }
            Err(Error::ElfParse { .. }) | Err(Error::UnsupportedTarget(_)) => rejected += 1,
            Err(e) => panic!("unexpected error kind: {e:?}"),
        }
    }
    assert_eq!(ok + rejected, 10_000);
    assert!(rejected > 0 && ok > 0, "ok={ok} rejected={rejected}");
}

#[test]
fn every_truncation_of_a_small_binary() {
    let data = std::fs::read(scriptdbg_fixtures::path("loop")).unwrap();
    for len in (0..data.len()).step_by(7) {
        match ElfFile::parse(&data[..len]) {
            Ok(_) | Err(Error::ElfParse { .. }) => {}
            Err(e) => panic!("truncation at {len}: {e:?}"),
        }
    }
}
