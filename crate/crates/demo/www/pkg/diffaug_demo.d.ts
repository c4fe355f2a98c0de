/* tslint:disable */
/* eslint-disable */

/**
 * `alpha_bar_t` for `t = 1..=steps`.
 */
export function alpha_bar_curve(steps: number, beta_start: number, beta_end: number): Float64Array;

/**
 * Display names of the six toy classes, in index order.
 */
export function class_names(): string[];

/**
 * Whether `label` is among the `k` best-scored classes.
 */
export function in_top_k(scores: Float64Array, label: number, k: number): boolean;

/**
 * The same toy image pushed to timestep `t` of a linear schedule.
 */
export function noised_toy(class_index: number, seed: number, size: number, t: number, steps: number, beta_start: number, beta_end: number): Uint8Array;

/**
 * Class indices from highest to lowest score; ties keep the lower index first.
 */
export function ranking(scores: Float64Array): Uint32Array;

/**
 * One toy image of the given class as `size * size * 4` RGBA bytes.
 */
export function render_toy(class_index: number, seed: number, size: number): Uint8Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly alpha_bar_curve: (a: number, b: number, c: number) => [number, number, number, number];
    readonly class_names: () => [number, number];
    readonly in_top_k: (a: number, b: number, c: number, d: number) => number;
    readonly noised_toy: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly ranking: (a: number, b: number) => [number, number];
    readonly render_toy: (a: number, b: number, c: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_drop_slice: (a: number, b: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
