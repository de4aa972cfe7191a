//! `SVRD` demonstration files.
//!
//! Layout (little-endian): magic `SVRD`, version u32, record count u32, then
//! per record: scenario seed u64, task id u32, token count u32, tokens u16
//! each, success byte.

use std::io::{Read, Write};

use super::{Demo, Token};
use crate::error::{Error, Result};

pub const DEMO_MAGIC: &[u8; 4] = b"SVRD";
pub const DEMO_VERSION: u32 = 1;

pub fn write_demos(mut w: impl Write, demos: &[Demo]) -> Result<()> {
    w.write_all(DEMO_MAGIC)?;
    w.write_all(&DEMO_VERSION.to_le_bytes())?;
    w.write_all(&(demos.len() as u32).to_le_bytes())?;
    for d in demos {
        w.write_all(&d.seed.to_le_bytes())?;
        w.write_all(&d.task_id.to_le_bytes())?;
        w.write_all(&(d.tokens.len() as u32).to_le_bytes())?;
        for t in &d.tokens {
            w.write_all(&t.to_le_bytes())?;
        }
        w.write_all(&[u8::from(d.success)])?;
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated demo file: {e}")))?;
    Ok(buf)
}

pub fn read_demos(mut r: impl Read) -> Result<Vec<Demo>> {
    let magic: [u8; 4] = read_array(&mut r)?;
    if &magic != DEMO_MAGIC {
        return Err(Error::Format("not an SVRD file".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != DEMO_VERSION {
        return Err(Error::Format(format!("unsupported SVRD version {version}")));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?);
    let mut demos = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let seed = u64::from_le_bytes(read_array(&mut r)?);
        let task_id = u32::from_le_bytes(read_array(&mut r)?);
        let len = u32::from_le_bytes(read_array(&mut r)?);
        let tokens = (0..len)
            .map(|_| read_array(&mut r).map(Token::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        let [flag] = read_array::<1>(&mut r)?;
        demos.push(Demo {
            seed,
            task_id,
            tokens,
            success: flag != 0,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after SVRD records".into()));
    }
    Ok(demos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn write_read_write_is_identical(
            recs in prop::collection::vec(
                (any::<u64>(), 0u32..4, prop::collection::vec(0u16..11, 0..40), any::<bool>()),
                0..8,
            )
        ) {
            let demos: Vec<Demo> = recs
                .into_iter()
                .map(|(seed, task_id, tokens, success)| Demo { seed, task_id, tokens, success })
                .collect();
            let mut a = Vec::new();
            write_demos(&mut a, &demos).unwrap();
            let back = read_demos(a.as_slice()).unwrap();
            prop_assert_eq!(&back, &demos);
            let mut b = Vec::new();
            write_demos(&mut b, &back).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn byte_layout() {
        let demos = vec![Demo {
            seed: 7,
            task_id: 2,
            tokens: vec![1, 10],
            success: true,
        }];
        let mut buf = Vec::new();
        write_demos(&mut buf, &demos).unwrap();
        let expected: Vec<u8> = [
            b"SVRD".as_slice(),
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &7u64.to_le_bytes(),
            &2u32.to_le_bytes(),
            &2u32.to_le_bytes(),
            &[1, 0, 10, 0],
            &[1],
        ]
        .concat();
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_demos(&b"XXXX"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_demos(
            &mut buf,
            &[Demo {
                seed: 1,
                task_id: 0,
                tokens: vec![3; 5],
                success: true,
            }],
        )
        .unwrap();
        buf.pop();
        assert!(matches!(read_demos(buf.as_slice()), Err(Error::Format(_))));
    }
}
