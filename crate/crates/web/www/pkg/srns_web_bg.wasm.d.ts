/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const alpha_schedule: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const compare_samplers: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
export const memory_inclusion: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
export const softmax_probabilities: (a: number, b: number, c: number) => [number, number, number, number];
export const variance_pick: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
