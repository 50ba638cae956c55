/* tslint:disable */
/* eslint-disable */

/**
 * Holds the bundled policy between calls.
 */
export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Fits one scene with RANSAC and with the learned sampler under the
     * same hypothesis budget.
     */
    compare(rate: number, n: number, seed: bigint, episodes: number, steps: number): string;
    constructor();
    /**
     * A seeded line scene: points, ground-truth inlier flags and the true
     * line `[a, b, c]`.
     */
    scene(rate: number, n: number, seed: bigint): string;
    /**
     * mAA and median error of both methods at each rate over `scenes`
     * seeded scenes.
     */
    sweep(rates: Float64Array, scenes: number, n: number, episodes: number, steps: number): string;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_compare: (a: number, b: number, c: number, d: bigint, e: number, f: number) => [number, number, number, number];
    readonly demo_new: () => [number, number, number];
    readonly demo_scene: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
    readonly demo_sweep: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
