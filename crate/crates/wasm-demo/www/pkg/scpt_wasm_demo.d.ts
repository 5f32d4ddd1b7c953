/* tslint:disable */
/* eslint-disable */

/**
 * Row-major image with its axes.
 */
export class Scalogram {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    readonly cols: number;
    readonly ridge_hz: number;
    readonly rows: number;
    /**
     * Values in `[0, 1]`, lowest frequency first.
     */
    readonly values: Float64Array;
}

/**
 * Peak radian frequency of the Morse window.
 */
export function morse_peak(gamma: number, beta: number): number;

/**
 * Frequency-domain Morse window sampled at `points` values of ω in `(0, omega_max]`.
 */
export function morse_window(gamma: number, beta: number, omega_max: number, points: number): Float64Array;

/**
 * Scalogram of a noisy pulse-like tone whose rate glides from `f_start_hz` to `f_end_hz`.
 */
export function scalogram(f_start_hz: number, f_end_hz: number, noise: number, seconds: number, size: number, seed: bigint): Scalogram;

/**
 * Singular values followed by cumulative explained variance for a random
 * `rows × cols` matrix of rank `rank` plus Gaussian noise.
 */
export function subspace_spectrum(rows: number, cols: number, rank: number, noise: number, seed: bigint): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_scalogram_free: (a: number, b: number) => void;
    readonly morse_peak: (a: number, b: number) => number;
    readonly morse_window: (a: number, b: number, c: number, d: number) => [number, number];
    readonly scalogram: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number];
    readonly scalogram_cols: (a: number) => number;
    readonly scalogram_ridge_hz: (a: number) => number;
    readonly scalogram_rows: (a: number) => number;
    readonly scalogram_values: (a: number) => [number, number];
    readonly subspace_spectrum: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
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
