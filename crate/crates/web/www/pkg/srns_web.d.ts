/* tslint:disable */
/* eslint-disable */

/**
 * `alpha_t` for `t = 1..=epochs`.
 */
export function alpha_schedule(schedule: string, alpha: number, warm_start: number, epochs: number): Float64Array;

/**
 * Trains GMF on a synthetic dataset with uniform, difficulty-only and
 * variance-based negatives under the same seed and noise level. Returns
 * JSON: `[{name, ndcg3: [...], ler: [...]}, ...]`, one entry per epoch.
 */
export function compare_samplers(sigma: number, alpha: number, epochs: number, seed: bigint): string;

/**
 * Fraction of `draws` refreshes in which each pool item lands in a memory
 * of `memory_size` slots.
 */
export function memory_inclusion(scores: Float64Array, tau: number, memory_size: number, draws: number, seed: bigint): Float64Array;

/**
 * `exp(s/tau) / sum exp(s'/tau)`.
 */
export function softmax_probabilities(scores: Float64Array, tau: number): Float64Array;

/**
 * Index chosen by `argmax ppos + alpha_t * std`, or -1 for an empty memory.
 */
export function variance_pick(ppos: Float64Array, stds: Float64Array, alpha_t: number): number;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly alpha_schedule: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly compare_samplers: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
    readonly memory_inclusion: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
    readonly softmax_probabilities: (a: number, b: number, c: number) => [number, number, number, number];
    readonly variance_pick: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
