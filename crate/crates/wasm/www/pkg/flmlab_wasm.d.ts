/* tslint:disable */
/* eslint-disable */

/**
 * One dependency matrix. `param` is the mask rate (mlm), the corrupted-span
 * ratio (prefixlm) or the corruption rate (flm); ignored for ar.
 */
export function dependency_matrix(kind: string, len: number, param: number, seed: bigint): string;

/**
 * Features a reconstruction query for target `i` may read given its span.
 */
export function query_keys(len: number, i: number, s: number, e: number): string;

/**
 * Mean `(r_pred, r_corr)` per kind over a grid of parameters, `samples` draws each.
 */
export function rate_sweep(len: number, samples: number, seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly dependency_matrix: (a: number, b: number, c: number, d: number, e: bigint) => [number, number];
    readonly query_keys: (a: number, b: number, c: number, d: number) => [number, number];
    readonly rate_sweep: (a: number, b: number, c: bigint) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
