/* tslint:disable */
/* eslint-disable */

/**
 * JavaScript handle on a [`Demo`].
 */
export class Explorer {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Analysis response as JSON. An empty `target` attributes the prediction.
     */
    ask_image(question: string, target: string): string;
    ask_text(context: string, question: string): string;
    /**
     * Returns the scene as JSON; fetch its pixels with `scene_png`.
     */
    draw_scene(seed: bigint, objects: number): string;
    /**
     * `method` is `logprob` or `avg-attention`.
     */
    heatmap_png(method: string): Uint8Array;
    layers(): number;
    constructor();
    probe_cell(row: number, col: number, layer: number, top_k: number): string;
    scene_png(): Uint8Array;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_explorer_free: (a: number, b: number) => void;
    readonly explorer_ask_image: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly explorer_ask_text: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly explorer_draw_scene: (a: number, b: bigint, c: number) => [number, number, number, number];
    readonly explorer_heatmap_png: (a: number, b: number, c: number) => [number, number, number, number];
    readonly explorer_layers: (a: number) => number;
    readonly explorer_new: () => [number, number, number];
    readonly explorer_probe_cell: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly explorer_scene_png: (a: number) => [number, number];
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
