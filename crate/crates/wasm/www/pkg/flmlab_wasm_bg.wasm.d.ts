/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const dependency_matrix: (a: number, b: number, c: number, d: number, e: bigint) => [number, number];
export const query_keys: (a: number, b: number, c: number, d: number) => [number, number];
export const rate_sweep: (a: number, b: number, c: bigint) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
