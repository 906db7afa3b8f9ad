//! Small shared helpers.

use std::collections::VecDeque;
use std::sync::Mutex;

/// Map `f` over `items` with up to `jobs` worker threads, returning
/// results in input order. Output is identical to a sequential map no
/// matter how completion interleaves, which keeps pipelines that fan out
/// over prompts deterministic.
pub fn parallel_map<T, R, F>(jobs: usize, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let n = items.len();
    if jobs <= 1 || n <= 1 {
        return items.into_iter().map(f).collect();
    }
    let queue: Mutex<VecDeque<(usize, T)>> = Mutex::new(items.into_iter().enumerate().collect());
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(n) {
            scope.spawn(|| loop {
                let Some((idx, item)) = queue.lock().expect("queue poisoned").pop_front() else {
                    break;
                };
                let result = f(item);
                results.lock().expect("results poisoned")[idx] = Some(result);
            });
        }
    });
    results
        .into_inner()
        .expect("results poisoned")
        .into_iter()
        .map(|slot| slot.expect("every index filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_input_order() {
        let items: Vec<usize> = (0..100).collect();
        let doubled = parallel_map(8, items.clone(), |x| x * 2);
        assert_eq!(doubled, items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn sequential_fallback_matches() {
        let items: Vec<usize> = (0..10).collect();
        assert_eq!(
            parallel_map(1, items.clone(), |x| x + 1),
            parallel_map(4, items, |x| x + 1)
        );
    }

    #[test]
    fn empty_input() {
        let out: Vec<usize> = parallel_map(4, Vec::<usize>::new(), |x| x);
        assert!(out.is_empty());
    }
}
